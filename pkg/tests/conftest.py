"""Test-suite environment: keep BLAS single-threaded.

The desk-scale matrices are small enough that thread fan-out costs more than
it saves; this must happen before numpy is first imported.
"""
import os

os.environ.setdefault("OMP_NUM_THREADS", "1")
os.environ.setdefault("OPENBLAS_NUM_THREADS", "1")
os.environ.setdefault("MKL_NUM_THREADS", "1")
