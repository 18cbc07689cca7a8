"""CAN-bus intrusion detection by masked CAN-ID prediction."""

__version__ = "0.1.0"
