import os

# Keep BLAS single-threaded: tiny matrices are faster that way and results
# stay bit-identical no matter how the suite is launched.
for var in ("OPENBLAS_NUM_THREADS", "OMP_NUM_THREADS", "MKL_NUM_THREADS"):
    os.environ.setdefault(var, "1")
