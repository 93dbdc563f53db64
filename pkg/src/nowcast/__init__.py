"""Nowcasting regional socio-economic indicators from call detail records."""

__version__ = "0.1.0"
