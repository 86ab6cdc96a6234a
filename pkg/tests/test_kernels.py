"""Tests para el módulo de kernels cuantizados."""

import pytest
import numpy as np

from src.kernels import (
    DenseMatrix,
    ThinMatrix,
    bitwise_equal,
    dot_block_q4_q8,
    gemm_thin,
    gemv_f32_reference,
    gemv_f64_oracle,
    gemv_naive_baseline,
    gemv_q4_q8,
    gemv_quantizing,
)
from src.quant import (
    BlockQ4,
    BlockQ8,
    QuantMatrixQ4,
    QuantVectorQ8,
    dequantize_matrix_q4,
    quantize_matrix_q4,
    quantize_vec_q8,
)

# Fixtures
@pytest.fixture
def rng() -> np.random.Generator:
    """Fixture que proporciona un generador con semilla fija."""
    return np.random.default_rng(2024)

@pytest.fixture
def unit_matrix() -> QuantMatrixQ4:
    """Fixture que proporciona una matriz 1×32 con escala 1 y códigos 9."""
    return QuantMatrixQ4.from_blocks(1, 32, [BlockQ4(1.0, (9,) * 32)])

@pytest.fixture
def unit_vector() -> QuantVectorQ8:
    """Fixture que proporciona un vector Q8 con escala 1 y códigos 1."""
    return QuantVectorQ8(32, np.ones(1, dtype=np.float32), np.ones((1, 32), dtype=np.int8))

@pytest.fixture
def random_case(rng) -> tuple[QuantMatrixQ4, np.ndarray]:
    """Fixture que proporciona una matriz Q4 de 300×256 y un vector."""
    matrix = quantize_matrix_q4(rng.standard_normal((300, 256), dtype=np.float32))
    return matrix, rng.standard_normal(256, dtype=np.float32)

# Tests para dot_block_q4_q8
@pytest.mark.parametrize('path', ['scalar', 'vector'])
def test_dot_block_hand_sum(path):
    """Test que verifica 32·(9-8)·1 = 32.0."""
    assert dot_block_q4_q8(BlockQ4(1.0, (9,) * 32), BlockQ8(1.0, (1,) * 32), path) == 32.0

@pytest.mark.parametrize('path', ['scalar', 'vector'])
def test_dot_block_zero_scale(path):
    """Test que verifica que un bloque de pesos nulo da 0.0."""
    assert dot_block_q4_q8(BlockQ4(0.0, (8,) * 32), BlockQ8(3.0, (100,) * 32), path) == 0.0

def test_dot_block_paths_identical(rng):
    """Test que verifica que ambos caminos coinciden en bloques aleatorios."""
    for _ in range(50):
        a = quantize_matrix_q4(rng.standard_normal((1, 32), dtype=np.float32)).block(0, 0)
        b = quantize_vec_q8(rng.standard_normal(32)).block(0)
        assert dot_block_q4_q8(a, b, 'scalar') == dot_block_q4_q8(a, b, 'vector')

def test_dot_block_unknown_path():
    """Test que verifica el rechazo de caminos desconocidos."""
    with pytest.raises(ValueError, match="Camino de kernel desconocido"):
        dot_block_q4_q8(BlockQ4(0.0, (8,) * 32), BlockQ8(0.0, (0,) * 32), 'simd')

# Tests para gemv_q4_q8
@pytest.mark.parametrize('path', ['scalar', 'vector'])
def test_gemv_q4_q8_hand_example(unit_matrix, unit_vector, path):
    """Test que verifica el ejemplo 1×32 → [32.0]."""
    np.testing.assert_array_equal(gemv_q4_q8(unit_matrix, unit_vector, path), [32.0])

def test_gemv_q4_q8_zero_matrix():
    """Test que verifica que una matriz nula da un vector nulo."""
    matrix = quantize_matrix_q4(np.zeros((4, 64)))
    out = gemv_q4_q8(matrix, quantize_vec_q8(np.ones(64)))
    np.testing.assert_array_equal(out, np.zeros(4))

def test_gemv_q4_q8_dimension_mismatch(unit_matrix):
    """Test que verifica el error de dimensiones."""
    with pytest.raises(ValueError, match="Dimensiones incompatibles"):
        gemv_q4_q8(unit_matrix, quantize_vec_q8(np.ones(64)))

# Tests para gemv_quantizing
def test_gemv_quantizing_zero_vector(random_case):
    """Test que verifica que x = 0 da un vector nulo."""
    matrix, _ = random_case
    np.testing.assert_array_equal(gemv_quantizing(matrix, np.zeros(256)), np.zeros(300))

def test_gemv_quantizing_paths_bitwise(rng):
    """Test que verifica que los caminos escalar y vectorial son idénticos bit a bit."""
    matrix = quantize_matrix_q4(rng.standard_normal((7, 128), dtype=np.float32))
    x = rng.standard_normal(128, dtype=np.float32)
    assert bitwise_equal(gemv_quantizing(matrix, x, 'scalar'), gemv_quantizing(matrix, x, 'vector'))

def test_gemv_quantizing_deterministic(random_case):
    """Test que verifica que dos llamadas iguales dan el mismo resultado bit a bit."""
    matrix, x = random_case
    assert bitwise_equal(gemv_quantizing(matrix, x), gemv_quantizing(matrix, x))

@pytest.mark.parametrize("path", ['vector', 'scalar'])
def test_gemv_quantizing_linear_in_weight_scales(random_case, path):
    """Test que verifica que duplicar todas las escalas de A duplica la salida bit a bit."""
    matrix, x = random_case
    doubled = QuantMatrixQ4(matrix.rows, matrix.cols, matrix.scales * np.float32(2), matrix.codes)
    out = gemv_quantizing(matrix, x, path)
    assert bitwise_equal(gemv_quantizing(doubled, x, path), out * np.float32(2))

def test_gemv_quantizing_matches_oracle(rng):
    """Test que verifica la tolerancia 1e-4·(1+|oráculo|) en casos aleatorios."""
    for _ in range(20):
        m = int(rng.integers(1, 65))
        n = 32 * int(rng.integers(1, 257))
        matrix = quantize_matrix_q4(rng.uniform(-1, 1, (m, n)).astype(np.float32))
        x = rng.uniform(-1, 1, n).astype(np.float32)
        oracle = gemv_f64_oracle(matrix, x)
        error = np.abs(gemv_quantizing(matrix, x).astype(np.float64) - oracle)
        assert np.all(error <= 1e-4 * (1 + np.abs(oracle)))

def test_gemv_quantizing_close_to_dense(rng):
    """Test que verifica el error RMS relativo frente a la referencia fp32 densa."""
    dense = rng.standard_normal((128, 4096), dtype=np.float32)
    x = rng.standard_normal(4096, dtype=np.float32)
    reference = gemv_f32_reference(DenseMatrix.from_array(dense), x).astype(np.float64)
    out = gemv_quantizing(quantize_matrix_q4(dense), x).astype(np.float64)
    rms = np.sqrt(np.mean((out - reference) ** 2) / np.mean(reference ** 2))
    assert rms <= 0.13

def test_gemv_quantizing_non_finite(random_case):
    """Test que verifica el rechazo de vectores no finitos."""
    matrix, x = random_case
    x = x.copy()
    x[0] = np.nan
    with pytest.raises(ValueError, match="no finita"):
        gemv_quantizing(matrix, x)

# Tests para gemm_thin
def test_gemm_thin_single_column(random_case):
    """Test que verifica que b = 1 coincide con gemv_quantizing."""
    matrix, x = random_case
    out = gemm_thin(matrix, ThinMatrix.from_columns([x]))
    assert out.shape == (300, 1)
    assert bitwise_equal(out[:, 0], gemv_quantizing(matrix, x))

@pytest.mark.parametrize('batch', [2, 8, 32])
def test_gemm_thin_columns_match_gemv(rng, random_case, batch):
    """Test que verifica la igualdad columna a columna con la GEMV."""
    matrix, _ = random_case
    thin = ThinMatrix.from_columns(rng.standard_normal((batch, 256), dtype=np.float32))
    out = gemm_thin(matrix, thin)
    for j in range(batch):
        assert bitwise_equal(out[:, j], gemv_quantizing(matrix, thin.column(j)))

def test_gemm_thin_equal_columns(random_case):
    """Test que verifica que dos columnas iguales dan dos salidas iguales."""
    matrix, x = random_case
    out = gemm_thin(matrix, ThinMatrix.from_columns([x, x]))
    assert bitwise_equal(out[:, 0], out[:, 1])

def test_gemm_thin_scalar_path(rng):
    """Test que verifica que el camino escalar de la GEMM fina coincide con el vectorial."""
    matrix = quantize_matrix_q4(rng.standard_normal((3, 64), dtype=np.float32))
    thin = ThinMatrix.from_columns(rng.standard_normal((2, 64), dtype=np.float32))
    assert bitwise_equal(gemm_thin(matrix, thin, 'scalar'), gemm_thin(matrix, thin, 'vector'))

def test_gemm_thin_dimension_mismatch(random_case):
    """Test que verifica el error de dimensiones."""
    matrix, _ = random_case
    with pytest.raises(ValueError, match="Dimensiones incompatibles"):
        gemm_thin(matrix, ThinMatrix.from_columns(np.zeros((2, 64))))

def test_thin_matrix_requires_columns():
    """Test que verifica que una matriz fina necesita al menos una columna."""
    with pytest.raises(ValueError, match="al menos una columna"):
        ThinMatrix(rows=32, cols=0, columns=np.zeros((0, 32)))

# Tests para las referencias y el baseline
def test_gemv_f32_reference_identity():
    """Test que verifica que la identidad devuelve x."""
    x = np.arange(32, dtype=np.float32)
    np.testing.assert_array_equal(gemv_f32_reference(DenseMatrix.from_array(np.eye(32)), x), x)

def test_gemv_f32_reference_zeros():
    """Test que verifica que una matriz nula da un vector nulo."""
    out = gemv_f32_reference(DenseMatrix.from_array(np.zeros((3, 32))), np.ones(32))
    np.testing.assert_array_equal(out, np.zeros(3))

def test_dense_matrix_non_finite():
    """Test que verifica el rechazo de matrices densas no finitas."""
    with pytest.raises(ValueError, match="no finita"):
        DenseMatrix.from_array(np.full((2, 32), np.inf))

def test_gemv_naive_baseline_hand_example(unit_matrix):
    """Test que verifica el ejemplo 1×32 → 32.0 exacto."""
    np.testing.assert_array_equal(gemv_naive_baseline(unit_matrix, np.ones(32)), [32.0])

def test_gemv_naive_baseline_zeros(random_case):
    """Test que verifica que x = 0 da un vector nulo."""
    matrix, _ = random_case
    np.testing.assert_array_equal(gemv_naive_baseline(matrix, np.zeros(256)), np.zeros(300))

def test_gemv_naive_baseline_close_to_dequantized(random_case):
    """Test que verifica que el baseline calcula A decuantizada por x sin cuantizar."""
    matrix, x = random_case
    expected = dequantize_matrix_q4(matrix).astype(np.float64) @ x.astype(np.float64)
    np.testing.assert_allclose(gemv_naive_baseline(matrix, x), expected, rtol=1e-4, atol=1e-4)

# Tests para bitwise_equal
def test_bitwise_equal_distinguishes_signed_zero():
    """Test que verifica que -0.0 y 0.0 no son iguales bit a bit."""
    assert not bitwise_equal(np.array([0.0]), np.array([-0.0]))
    assert bitwise_equal(np.array([1.5]), np.array([1.5]))

if __name__ == '__main__':
    pytest.main(['-v', __file__])
