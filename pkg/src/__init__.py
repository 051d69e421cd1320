"""MTFS private storage network package"""
__version__ = "1.0.0"
__description__ = "Encrypted, content-addressed file storage over a self-organizing binary-tree overlay"
