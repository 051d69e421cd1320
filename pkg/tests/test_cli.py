"""
Tests for the command-line surface: config layering, identity files and sim runs
"""
import io
import json
import tempfile
import unittest
from contextlib import redirect_stderr, redirect_stdout
from pathlib import Path

import pandas as pd

from config.settings import ENV_DATA_DIR, ENV_ENTRY, REPLICATION_FACTOR
from src.cli import create_parser, load_config, load_identity, main, parse_address
from src.errors import InvalidKey, WorkflowError


def _run(argv, env=None):
    out, err = io.StringIO(), io.StringIO()
    with redirect_stdout(out), redirect_stderr(err):
        code = main(argv, env or {})
    return code, out.getvalue(), err.getvalue()


class CliCase(unittest.TestCase):

    def setUp(self):
        self.tmp = tempfile.TemporaryDirectory()
        self.addCleanup(self.tmp.cleanup)
        self.dir = Path(self.tmp.name)
        self.env = {ENV_DATA_DIR: str(self.dir)}


class TestKeygen(CliCase):
    """Test identity creation"""

    def test_keygen_writes_identity(self):
        code, out, _ = _run(['keygen', '--json'], self.env)
        self.assertEqual(code, 0)
        record = json.loads(out)
        keys = load_identity(self.dir / 'identity.json')
        self.assertEqual(keys.public.hex(), record['public_key'])
        self.assertEqual(keys.public.digest(), record['owner'])

    def test_existing_identity_needs_force(self):
        self.assertEqual(_run(['keygen'], self.env)[0], 0)
        code, _, err = _run(['keygen'], self.env)
        self.assertEqual(code, 1)
        self.assertEqual(json.loads(err)['error'], 'WorkflowError')
        self.assertEqual(_run(['keygen', '--force'], self.env)[0], 0)

    def test_missing_identity(self):
        with self.assertRaises(InvalidKey):
            load_identity(self.dir / 'absent.json')
        (self.dir / 'broken.json').write_text('{"private": "zz"}')
        with self.assertRaises(InvalidKey):
            load_identity(self.dir / 'broken.json')


class TestConfig(CliCase):
    """Test that defaults < file < environment < flags"""

    def _write_config(self):
        path = self.dir / 'mtfs.toml'
        path.write_text('entry = "10.0.0.1:7000"\nr = 2\nmystery = true\n')
        return path

    def test_defaults(self):
        args = create_parser().parse_args(['ls', '--config', str(self.dir / 'none.toml')])
        config = load_config(args, env={})
        self.assertEqual(config.r, REPLICATION_FACTOR)
        self.assertFalse(config.json_output)

    def test_layering(self):
        path = self._write_config()
        args = create_parser().parse_args(['ls', '--config', str(path)])
        self.assertEqual(load_config(args, env={}).entry, '10.0.0.1:7000')
        self.assertEqual(load_config(args, env={}).r, 2)

        env = {ENV_ENTRY: '10.0.0.2:7000'}
        self.assertEqual(load_config(args, env=env).entry, '10.0.0.2:7000')

        args = create_parser().parse_args(['ls', '--config', str(path), '--entry', '10.0.0.3:7000', '--r', '1'])
        config = load_config(args, env=env)
        self.assertEqual(config.entry_address, ('10.0.0.3', 7000))
        self.assertEqual(config.r, 1)

    def test_data_dir_moves_identity(self):
        args = create_parser().parse_args(['ls', '--config', str(self.dir / 'none.toml')])
        config = load_config(args, env=self.env)
        self.assertEqual(config.identity, self.dir / 'identity.json')

    def test_bad_config_file(self):
        path = self.dir / 'mtfs.toml'
        path.write_text('entry = [unterminated\n')
        args = create_parser().parse_args(['ls', '--config', str(path)])
        with self.assertRaises(WorkflowError):
            load_config(args, env={})

    def test_parse_address(self):
        self.assertEqual(parse_address('127.0.0.1:7717'), ('127.0.0.1', 7717))
        self.assertEqual(parse_address(':7717')[1], 7717)
        for bad in ('127.0.0.1', 'host:port', ''):
            with self.assertRaises(WorkflowError):
                parse_address(bad)


class TestUsage(CliCase):

    def test_usage_errors_exit_2(self):
        self.assertEqual(_run([])[0], 2)
        self.assertEqual(_run(['bogus'])[0], 2)
        self.assertEqual(_run(['sim'])[0], 2)

    def test_help_exits_0(self):
        self.assertEqual(_run(['--help'])[0], 0)


class TestSimRun(CliCase):
    """Test scenario runs end to end through main"""

    def _script(self, text):
        path = self.dir / 'scenario.txt'
        path.write_text(text)
        return str(path)

    def test_scenario_outputs(self):
        script = self._script(
            "# upload and read back\n"
            "broadcast from 0 payload 00ff\n"
            "put alice /a.txt 2048\n"
            "get alice /a.txt\n"
        )
        csv_path = self.dir / 'out' / 'traces.csv'
        code, out, _ = _run(['sim', 'run', script, '--nodes', '7', '--seed', '3', '--json',
                             '--trace-csv', str(csv_path)], self.env)
        self.assertEqual(code, 0)
        rows = json.loads(out)
        self.assertEqual([r['op'] for r in rows], ['broadcast', 'put', 'get'])
        self.assertEqual(rows[0]['coverage'], 1.0)
        self.assertEqual(rows[1]['sha256'], rows[2]['sha256'])
        frame = pd.read_csv(csv_path)
        self.assertEqual(len(frame), 7)

    def test_same_seed_same_output(self):
        script = self._script("put alice /a.txt 512\nbroadcast from 2 payload 01\n")
        first = _run(['sim', 'run', script, '--nodes', '5', '--json'], self.env)[1]
        second = _run(['sim', 'run', script, '--nodes', '5', '--json'], self.env)[1]
        self.assertEqual(first, second)

    def test_events_export(self):
        """Only protocol events of the run end up in the export"""
        script = self._script("put alice /a.txt 512\n")
        events_path = self.dir / 'out' / 'events.json'
        _run(['sim', 'run', script, '--nodes', '3', '--json'], self.env)
        code, _, _ = _run(['sim', 'run', script, '--nodes', '3', '--json',
                           '--events', str(events_path)], self.env)
        self.assertEqual(code, 0)
        types = [e['event_type'] for e in json.loads(events_path.read_text())]
        self.assertEqual(types.count('file_stored'), 1)
        self.assertEqual(types.count('tree_bootstrapped'), 1)
        self.assertIn('contract_committed', types)

    def test_scenario_error_reported_as_json(self):
        script = self._script("join 3\nexplode now\n")
        code, _, err = _run(['sim', 'run', script], self.env)
        self.assertEqual(code, 1)
        record = json.loads(err.strip().splitlines()[-1])
        self.assertEqual(record['error'], 'ScenarioError')
        self.assertIn('line 2', record['message'])

    def test_missing_script(self):
        code, _, err = _run(['sim', 'run', str(self.dir / 'absent.txt')], self.env)
        self.assertEqual(code, 1)
        self.assertEqual(json.loads(err)['error'], 'FileNotFoundError')


if __name__ == '__main__':
    unittest.main()
