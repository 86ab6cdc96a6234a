"""qbench: kernels GEMV cuantizados Q4/Q8 y arnés de benchmarks."""
