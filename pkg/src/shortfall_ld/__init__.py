"""Large-deviation shortfall rates, optimal benchmark-relative portfolios and their Monte Carlo verification."""

__version__ = "0.1.0"
