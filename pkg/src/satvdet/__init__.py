"""Moving-vehicle detection in satellite video with heatmap-regression CNNs, in plain numpy."""

import os

__version__ = "0.1.0"

# SATVDET_THREADS caps BLAS threads; it only takes effect if numpy is not yet imported
if os.environ.get("SATVDET_THREADS"):
    for _var in ("OPENBLAS_NUM_THREADS", "OMP_NUM_THREADS", "MKL_NUM_THREADS"):
        os.environ.setdefault(_var, os.environ["SATVDET_THREADS"])
