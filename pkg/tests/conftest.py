import os

# Pin BLAS threading before numpy loads anywhere; keeps timings and
# bit-level determinism stable on small desk-scale matrices.
os.environ.setdefault("OPENBLAS_NUM_THREADS", "1")
os.environ.setdefault("OMP_NUM_THREADS", "1")
os.environ.setdefault("MKL_NUM_THREADS", "1")
