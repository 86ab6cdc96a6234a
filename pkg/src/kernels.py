"""
Módulo de kernels cuantizados: GEMV Q4×Q8, su extensión a matrices finas
(prefill), los oráculos de referencia y un baseline ingenuo para medir la
aceleración.

Cada kernel tiene dos caminos bit a bit idénticos: ``scalar`` (bucles
definicionales en Python) y ``vector`` (numpy, paralelo por carriles).
"""

from dataclasses import dataclass
from typing import Final, Literal, Sequence, TypeAlias
import numpy as np
from src.quant import (
    Q4_OFFSET,
    BlockQ4,
    BlockQ8,
    QuantMatrixQ4,
    QuantVectorQ8,
    dequantize_matrix_q4,
    dequantize_vec_q8,
    quantize_q8_array,
    quantize_vec_q8,
)

# Type aliases
KernelPath: TypeAlias = Literal['vector', 'scalar']

# Filas por tesela en el camino vectorial; acota la memoria temporal de gemm_thin
ROW_TILE: Final[int] = 256
KERNEL_PATHS: Final[tuple[str, ...]] = ('vector', 'scalar')


@dataclass(eq=False)
class DenseMatrix:
    """Matriz densa m×n en float32, orden de filas (operando de referencia)."""
    rows: int
    cols: int
    values: np.ndarray

    def __post_init__(self) -> None:
        self.values = np.asarray(self.values, dtype=np.float32)
        if self.values.shape != (self.rows, self.cols):
            raise ValueError(
                f"Valores con forma {self.values.shape}, se esperaba {(self.rows, self.cols)}"
            )
        if not np.all(np.isfinite(self.values)):
            raise ValueError("Entrada no finita en la matriz densa")

    @classmethod
    def from_array(cls, values: np.ndarray) -> 'DenseMatrix':
        """Construye la matriz a partir de un array bidimensional."""
        array = np.asarray(values, dtype=np.float32)
        if array.ndim != 2:
            raise ValueError("Error de forma: se esperaba una matriz bidimensional")
        return cls(rows=array.shape[0], cols=array.shape[1], values=array)


@dataclass(eq=False)
class ThinMatrix:
    """
    Matriz fina n×b: b vectores de activación de longitud n.

    Attributes:
        rows: Longitud n de cada columna
        cols: Número b de columnas (b >= 1)
        columns: Array (b, n) float32; la fila j es la columna j (orden por columnas)
    """
    rows: int
    cols: int
    columns: np.ndarray

    def __post_init__(self) -> None:
        self.columns = np.ascontiguousarray(self.columns, dtype=np.float32)
        if self.cols < 1:
            raise ValueError("Una matriz fina necesita al menos una columna")
        if self.columns.shape != (self.cols, self.rows):
            raise ValueError(
                f"Columnas con forma {self.columns.shape}, se esperaba {(self.cols, self.rows)}"
            )

    @classmethod
    def from_columns(cls, columns: Sequence[np.ndarray] | np.ndarray) -> 'ThinMatrix':
        """Construye la matriz fina apilando vectores columna."""
        array = np.asarray(columns, dtype=np.float32)
        if array.ndim != 2:
            raise ValueError("Error de forma: se esperaba una lista de vectores")
        return cls(rows=array.shape[1], cols=array.shape[0], columns=array)

    def column(self, index: int) -> np.ndarray:
        """Devuelve la columna ``index`` como vector."""
        return self.columns[index]


def _check_path(path: str) -> None:
    if path not in KERNEL_PATHS:
        raise ValueError(f"Camino de kernel desconocido: {path}")


def _check_dims(matrix: QuantMatrixQ4, n: int) -> None:
    if matrix.cols != n:
        raise ValueError(
            f"Dimensiones incompatibles: la matriz tiene {matrix.cols} columnas "
            f"y el vector {n} elementos"
        )


def _dot_scalar(a: BlockQ4, b: BlockQ8) -> np.float32:
    # Suma entera exacta; solo las escalas introducen redondeo
    total = sum((ca - Q4_OFFSET) * cb for ca, cb in zip(a.codes, b.codes))
    combined = np.float32(a.scale) * np.float32(b.scale)
    return np.float32(combined * np.float32(total))


def dot_block_q4_q8(a: BlockQ4, b: BlockQ8, path: KernelPath = 'scalar') -> float:
    """
    Producto escalar de un bloque de pesos Q4 por un bloque de activaciones Q8.

    Calcula S = Σ (a_i - 8)·b_i en enteros y devuelve (a.scale · b.scale) · S
    en float32.

    Args:
        a: Bloque de pesos
        b: Bloque de activaciones
        path: 'scalar' (bucle definicional) o 'vector' (numpy)

    Returns:
        Valor float32 del producto, como float de Python

    Examples:
        >>> a = BlockQ4(1.0, (9,) * 32)
        >>> b = BlockQ8(1.0, (1,) * 32)
        >>> dot_block_q4_q8(a, b)
        32.0
    """
    _check_path(path)
    if path == 'scalar':
        return float(_dot_scalar(a, b))

    codes_a = np.asarray(a.codes, dtype=np.int32) - Q4_OFFSET
    codes_b = np.asarray(b.codes, dtype=np.int32)
    total = np.dot(codes_a, codes_b)
    combined = np.float32(a.scale) * np.float32(b.scale)
    return float(np.float32(combined * np.float32(total)))


def _vector_core(matrix: QuantMatrixQ4, scales_x: np.ndarray, codes_x: np.ndarray) -> np.ndarray:
    """
    Camino vectorial común a GEMV y GEMM fina.

    Args:
        matrix: Pesos Q4 (m filas, nb bloques por fila)
        scales_x: Escalas Q8 de las b columnas, forma (b, nb)
        codes_x: Códigos Q8 de las b columnas, forma (b, nb, 32)

    Returns:
        Salida float32 con forma (m, b)
    """
    n_cols = scales_x.shape[0]
    n_blocks = matrix.blocks_per_row
    # Σ(a-8)·b = Σ a·b - 8·Σ b; |Σ a·b| <= 32·15·127 < 2^24, así que en float32
    # todas las sumas parciales son enteros exactos y el orden de BLAS no importa
    correction = codes_x.sum(axis=-1, dtype=np.int32) * np.int32(Q4_OFFSET)
    correction = correction.T.astype(np.float32)[None, :, :]
    lanes_x = codes_x.astype(np.float32).transpose(1, 2, 0)
    scales_xt = scales_x.T[None, :, :]

    out = np.empty((matrix.rows, n_cols), dtype=np.float32)
    for start in range(0, matrix.rows, ROW_TILE):
        end = min(start + ROW_TILE, matrix.rows)
        lanes_a = matrix.codes[start:end].astype(np.float32).transpose(1, 0, 2)
        raw = np.matmul(lanes_a, lanes_x).transpose(1, 0, 2)
        sums = raw - correction
        terms = (matrix.scales[start:end, :, None] * scales_xt) * sums

        acc = np.zeros((end - start, n_cols), dtype=np.float32)
        for j in range(n_blocks):
            acc += terms[:, j, :]
        out[start:end] = acc
    return out


def gemv_q4_q8(matrix: QuantMatrixQ4, x: QuantVectorQ8, path: KernelPath = 'vector') -> np.ndarray:
    """
    GEMV con pesos Q4 y vector ya cuantizado en Q8.

    Bucle exterior sobre las filas de A, interior sobre sus bloques; la
    acumulación entre bloques es float32 de izquierda a derecha.

    Args:
        matrix: Matriz de pesos m×n
        x: Vector cuantizado de longitud n
        path: Camino de ejecución

    Returns:
        Vector float32 de m elementos

    Raises:
        ValueError: Si las dimensiones no coinciden
    """
    _check_path(path)
    _check_dims(matrix, x.length)

    if path == 'vector':
        return _vector_core(matrix, x.scales[None, :], x.codes[None, :, :])[:, 0]

    x_blocks = [x.block(j) for j in range(matrix.blocks_per_row)]
    out = np.empty(matrix.rows, dtype=np.float32)
    for row in range(matrix.rows):
        acc = np.float32(0)
        for index, block in enumerate(x_blocks):
            acc = np.float32(acc + _dot_scalar(matrix.block(row, index), block))
        out[row] = acc
    return out


def gemv_quantizing(matrix: QuantMatrixQ4, x: np.ndarray, path: KernelPath = 'vector') -> np.ndarray:
    """
    Kernel completo: cuantiza x a int8 y ejecuta la GEMV Q4×Q8.

    Raises:
        ValueError: Si las dimensiones no coinciden o x no es finito
    """
    vector = np.asarray(x, dtype=np.float32)
    _check_dims(matrix, vector.size)
    return gemv_q4_q8(matrix, quantize_vec_q8(vector), path)


def gemm_thin(matrix: QuantMatrixQ4, x: ThinMatrix, path: KernelPath = 'vector') -> np.ndarray:
    """
    GEMM con una matriz fina de activaciones (prefill).

    La columna j de la salida es bit a bit igual a
    ``gemv_quantizing(matrix, x.column(j))``. El camino vectorial reutiliza
    cada tesela de bloques de A para todas las columnas.

    Args:
        matrix: Pesos Q4 m×n
        x: Matriz fina n×b
        path: Camino de ejecución

    Returns:
        Array float32 con forma (m, b)

    Raises:
        ValueError: Si las dimensiones no coinciden
    """
    _check_path(path)
    _check_dims(matrix, x.rows)

    if path == 'scalar':
        columns = [gemv_quantizing(matrix, x.column(j), 'scalar') for j in range(x.cols)]
        return np.stack(columns, axis=1)

    scales_x, codes_x = quantize_q8_array(x.columns)
    return _vector_core(matrix, scales_x, codes_x)


def gemv_f32_reference(matrix: DenseMatrix, x: np.ndarray) -> np.ndarray:
    """Producto matriz-vector con acumulación fp64, redondeado a float32 al final."""
    vector = np.asarray(x, dtype=np.float64)
    if matrix.cols != vector.size:
        raise ValueError(
            f"Dimensiones incompatibles: {matrix.cols} columnas y {vector.size} elementos"
        )
    return (matrix.values.astype(np.float64) @ vector).astype(np.float32)


def gemv_f64_oracle(matrix: QuantMatrixQ4, x: np.ndarray) -> np.ndarray:
    """
    Oráculo fp64 con operandos decuantizados.

    Decuantiza A y quantize_vec_q8(x) y calcula el producto en fp64.

    Returns:
        Vector float64 de m elementos
    """
    vector = np.asarray(x, dtype=np.float32)
    _check_dims(matrix, vector.size)
    weights = dequantize_matrix_q4(matrix).astype(np.float64)
    activations = dequantize_vec_q8(quantize_vec_q8(vector)).astype(np.float64)
    return weights @ activations


def gemv_naive_baseline(matrix: QuantMatrixQ4, x: np.ndarray) -> np.ndarray:
    """
    Baseline ingenuo: recorre A fila a fila, decuantiza sus bloques a float32
    al vuelo y hace el producto escalar fp32 con x sin cuantizar.

    No sufre el error de Q8, así que sus resultados difieren del kernel;
    solo sirve como referencia de velocidad.
    """
    vector = np.asarray(x, dtype=np.float32)
    _check_dims(matrix, vector.size)

    out = np.empty(matrix.rows, dtype=np.float32)
    for row in range(matrix.rows):
        weights = matrix.codes[row].astype(np.float32) - np.float32(Q4_OFFSET)
        weights *= matrix.scales[row, :, None]
        out[row] = np.dot(weights.reshape(-1), vector)
    return out


def bitwise_equal(a: np.ndarray, b: np.ndarray) -> bool:
    """Igualdad bit a bit de dos arrays float32 (distingue -0.0 de 0.0)."""
    left = np.ascontiguousarray(a, dtype=np.float32)
    right = np.ascontiguousarray(b, dtype=np.float32)
    return left.shape == right.shape and np.array_equal(left.view(np.uint32), right.view(np.uint32))
