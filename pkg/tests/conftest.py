# Cap BLAS thread pools before numpy loads so timing-sensitive tests
# measure single-core work and results are machine-independent.
import os

for _var in ("OPENBLAS_NUM_THREADS", "OMP_NUM_THREADS", "MKL_NUM_THREADS"):
    os.environ.setdefault(_var, "1")
