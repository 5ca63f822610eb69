"""Full-reference video quality toolkit: multiscale features, a dynamic-texture
aware ADM, SVR fusion with greedy feature selection, and rank-statistics
evaluation."""

__version__ = "0.1.0"
