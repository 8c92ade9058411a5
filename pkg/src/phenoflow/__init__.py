"""Grassland phenology from NDVI time series.

Submodules:
    data        records, CSV ingestion, weekly weather, synthetic generator
    seasonfit   penalized double logistic fit per plot-year
    phenology   SOS / POS / PEAK extraction and QC
    linstats    OLS with t-tests, Pearson correlation
    neural      79-feature MLP, tuning, evaluation
    explain     Kernel SHAP and variable aggregates
    pipeline    command implementations; ``cli`` is the entry point
"""

__version__ = "0.1.0"
