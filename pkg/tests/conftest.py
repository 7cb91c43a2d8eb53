import os

# Pin BLAS threading before numpy loads: keeps runs bit-reproducible and
# stops worker processes from oversubscribing the machine.
for var in ("OPENBLAS_NUM_THREADS", "OMP_NUM_THREADS", "MKL_NUM_THREADS"):
    os.environ.setdefault(var, "1")
