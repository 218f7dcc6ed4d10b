"""soupbench: build weight-ensembles from model populations and analyze what drives selection.

The package is organized as a file-based pipeline:

- :mod:`soupbench.bundle` -- on-disk model populations and the weight-averaging primitive
- :mod:`soupbench.metrics` -- pairwise distances between models (ratio-error diversity, squared Euclidean)
- :mod:`soupbench.soup` -- the greedy / greedier / ranked selection algorithms and their trajectories
- :mod:`soupbench.synth` -- synthetic multi-domain benchmark and MLP training
- :mod:`soupbench.analysis` -- trajectory statistics (differenced series, quantiles, error dynamics)
- :mod:`soupbench.mds` -- metric and non-metric multidimensional scaling (SMACOF)
- :mod:`soupbench.triangulate` -- Delaunay triangulation for the accuracy backdrop
- :mod:`soupbench.svgfig` -- standalone SVG figure rendering
- :mod:`soupbench.cli` -- pipeline driver (``soupbench generate|soup|analyze|mds|report|verify``)
"""

from soupbench.errors import DataError, SoupbenchError, UsageError

__version__ = "0.1.0"

__all__ = ["DataError", "SoupbenchError", "UsageError", "__version__"]
