# geopulse: geo-temporal crowd anomalies and story threads

__version__ = "0.1.0"
