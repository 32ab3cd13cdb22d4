"""Cell-graph MIL engine: radius graphs over cell tables, a dual-branch
EdgeConv scorer trained with a pairwise ranking loss, and downstream
evaluation (classification metrics, survival stratification, feature
attribution)."""

__version__ = "0.1.0"

from mesograph.errors import DataError, NumericalError

__all__ = ["DataError", "NumericalError", "__version__"]
