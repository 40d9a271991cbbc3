"""DCRNet CSI feedback autoencoder.

Importing the package caps BLAS threads at ``DCRNET_THREADS`` (default 1)
unless the usual OpenBLAS/OpenMP variables are already set, so results do not
depend on the machine's core count. This only takes effect when dcrnet is
imported before numpy.
"""

import os

_threads = os.environ.get("DCRNET_THREADS", "1")
for _var in ("OPENBLAS_NUM_THREADS", "OMP_NUM_THREADS", "MKL_NUM_THREADS"):
    os.environ.setdefault(_var, _threads)
del _var, _threads

__version__ = "0.1.0"
