"""MTFS configuration package"""
from .settings import *
