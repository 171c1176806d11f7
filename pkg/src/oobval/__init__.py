"""Out-of-bag data valuation for bagging ensembles.

Submodules: data (ingestion/synthesis/splitting/corruption), forest
(weighted CART + bagging), oob (the out-of-bag values, per-bootstrap scores,
influence function, order-consistency checks), baselines (KNN Shapley,
Monte-Carlo semivalues, AME/LASSO), evaluation (detection, removal, timing),
cli (reproducible runs).
"""

__version__ = "0.1.0"
