"""Physics-informed neural networks for pollutant dispersion and source localization."""

__version__ = "0.1.0"
