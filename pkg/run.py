#!/usr/bin/env python3
"""
MTFS - Main Entry Point

Usage:
    python run.py <command> [options]

Examples:
    python run.py keygen
    python run.py node start --port 7717 --with-ledger
    python run.py put notes.txt /notes.txt --ledger 127.0.0.1:7718
    python run.py sim run scenario.txt --trace-csv traces.csv
"""
from pathlib import Path
import sys

# Add parent directory to path
sys.path.insert(0, str(Path(__file__).parent))

from src.cli import main


if __name__ == '__main__':
    sys.exit(main())
