"""Species distribution modeling toolkit.

Spatial, co-occurrence, environmental and joint models evaluated by Mean
Reciprocal Rank, plus a synthetic world generator to exercise them.
"""

__version__ = "0.1.0"

SPLIT_TAGS = ("train", "validation", "prevalidation", "test", "none")
PREDICTION_LIMIT = 100
