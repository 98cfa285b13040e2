"""Channel-charting-aided semi-supervised localization for mmWave MIMO links."""

__version__ = "0.1.0"
