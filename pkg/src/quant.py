"""
Módulo de formatos de cuantización por bloques.

Bloques de pesos de 4 bits (Q4_0) y bloques de activaciones de 8 bits (Q8),
sus decuantizadores y el contenedor binario ``.qmat`` para matrices Q4.
"""

from dataclasses import dataclass
from os import PathLike
from pathlib import Path
from typing import Final, Iterator, Sequence, TypeAlias
import numpy as np

# Type aliases
PathType: TypeAlias = str | PathLike[str] | Path

# Constantes del formato
BLOCK_SIZE: Final[int] = 32
Q4_OFFSET: Final[int] = 8
Q4_MAX_CODE: Final[int] = 15
Q8_MAX_CODE: Final[int] = 127

QMAT_MAGIC: Final[bytes] = b'QMAT'
QMAT_VERSION: Final[int] = 1
QMAT_KIND_Q4_0: Final[int] = 0
QMAT_HEADER: Final[np.dtype] = np.dtype([
    ('magic', 'S4'),
    ('version', '<u4'),
    ('rows', '<u8'),
    ('cols', '<u8'),
    ('kind', 'u1'),
    ('reserved', 'u1', (7,)),
])
QMAT_BLOCK: Final[np.dtype] = np.dtype([
    ('scale', '<f4'),
    ('qs', 'u1', (BLOCK_SIZE // 2,)),
])


@dataclass(frozen=True)
class BlockQ4:
    """Bloque de 32 pesos: una escala real y 32 códigos sin signo de 4 bits."""
    scale: float
    codes: tuple[int, ...]

    def __post_init__(self) -> None:
        if len(self.codes) != BLOCK_SIZE:
            raise ValueError(f"Un bloque Q4 necesita {BLOCK_SIZE} códigos")
        if any(c < 0 or c > Q4_MAX_CODE for c in self.codes):
            raise ValueError("Los códigos Q4 deben estar en [0, 15]")
        if self.scale == 0 and any(c != Q4_OFFSET for c in self.codes):
            raise ValueError("Un bloque Q4 con escala 0 debe tener todos los códigos a 8")


@dataclass(frozen=True)
class BlockQ8:
    """Bloque de 32 activaciones: una escala real y 32 códigos con signo de 8 bits."""
    scale: float
    codes: tuple[int, ...]

    def __post_init__(self) -> None:
        if len(self.codes) != BLOCK_SIZE:
            raise ValueError(f"Un bloque Q8 necesita {BLOCK_SIZE} códigos")
        if any(c < -Q8_MAX_CODE or c > Q8_MAX_CODE for c in self.codes):
            raise ValueError("Los códigos Q8 deben estar en [-127, 127]")
        if self.scale == 0 and any(c != 0 for c in self.codes):
            raise ValueError("Un bloque Q8 con escala 0 debe tener todos los códigos a 0")


@dataclass(eq=False)
class QuantMatrixQ4:
    """
    Matriz m×n de bloques Q4 en orden de filas.

    Attributes:
        rows: Número de filas (m)
        cols: Número de columnas (n), múltiplo de 32
        scales: Escalas float32 con forma (m, n/32)
        codes: Códigos uint8 en [0, 15] con forma (m, n/32, 32)
    """
    rows: int
    cols: int
    scales: np.ndarray
    codes: np.ndarray

    def __post_init__(self) -> None:
        self.scales = np.asarray(self.scales, dtype=np.float32)
        self.codes = np.asarray(self.codes, dtype=np.uint8)
        if self.rows < 1 or self.cols < 1:
            raise ValueError("Las dimensiones de la matriz deben ser positivas")
        check_block_multiple(self.cols)
        n_blocks = self.cols // BLOCK_SIZE
        if self.scales.shape != (self.rows, n_blocks):
            raise ValueError(
                f"Escalas con forma {self.scales.shape}, se esperaba {(self.rows, n_blocks)}"
            )
        if self.codes.shape != (self.rows, n_blocks, BLOCK_SIZE):
            raise ValueError(
                f"Códigos con forma {self.codes.shape}, "
                f"se esperaba {(self.rows, n_blocks, BLOCK_SIZE)}"
            )

    @property
    def blocks_per_row(self) -> int:
        """Número de bloques por fila (n/32)."""
        return self.cols // BLOCK_SIZE

    def block(self, row: int, index: int) -> BlockQ4:
        """Devuelve el bloque ``index`` de la fila ``row`` como BlockQ4."""
        return BlockQ4(
            scale=float(self.scales[row, index]),
            codes=tuple(int(c) for c in self.codes[row, index])
        )

    def blocks(self) -> Iterator[BlockQ4]:
        """Recorre todos los bloques en orden de filas."""
        for row in range(self.rows):
            for index in range(self.blocks_per_row):
                yield self.block(row, index)

    def row_slice(self, start: int, end: int, copy: bool = False) -> 'QuantMatrixQ4':
        """
        Devuelve las filas [start, end) como una nueva matriz.

        Args:
            start: Primera fila incluida
            end: Primera fila excluida
            copy: Si es True, copia los datos en memoria nueva

        Returns:
            QuantMatrixQ4 con end - start filas
        """
        if not 0 <= start < end <= self.rows:
            raise ValueError(f"Rango de filas inválido: [{start}, {end}) para {self.rows} filas")
        scales = self.scales[start:end]
        codes = self.codes[start:end]
        if copy:
            scales, codes = scales.copy(), codes.copy()
        return QuantMatrixQ4(rows=end - start, cols=self.cols, scales=scales, codes=codes)

    @classmethod
    def from_blocks(cls, rows: int, cols: int, blocks: Sequence[BlockQ4]) -> 'QuantMatrixQ4':
        """Construye la matriz a partir de sus bloques en orden de filas."""
        check_block_multiple(cols)
        n_blocks = cols // BLOCK_SIZE
        if len(blocks) != rows * n_blocks:
            raise ValueError(f"Se esperaban {rows * n_blocks} bloques, hay {len(blocks)}")
        scales = np.array([b.scale for b in blocks], dtype=np.float32)
        codes = np.array([b.codes for b in blocks], dtype=np.uint8)
        return cls(
            rows=rows,
            cols=cols,
            scales=scales.reshape(rows, n_blocks),
            codes=codes.reshape(rows, n_blocks, BLOCK_SIZE)
        )


@dataclass(eq=False)
class QuantVectorQ8:
    """
    Vector de longitud n cuantizado en bloques Q8.

    Attributes:
        length: Longitud n, múltiplo de 32
        scales: Escalas float32 con forma (n/32,)
        codes: Códigos int8 con forma (n/32, 32)
    """
    length: int
    scales: np.ndarray
    codes: np.ndarray

    def __post_init__(self) -> None:
        check_block_multiple(self.length)
        n_blocks = self.length // BLOCK_SIZE
        if self.scales.shape != (n_blocks,) or self.codes.shape != (n_blocks, BLOCK_SIZE):
            raise ValueError(f"Un vector Q8 de longitud {self.length} necesita {n_blocks} bloques")

    def block(self, index: int) -> BlockQ8:
        """Devuelve el bloque ``index`` como BlockQ8."""
        return BlockQ8(
            scale=float(self.scales[index]),
            codes=tuple(int(c) for c in self.codes[index])
        )


def check_block_multiple(n: int) -> None:
    """
    Comprueba que una longitud sea un múltiplo positivo del tamaño de bloque.

    Raises:
        ValueError: Si n no es múltiplo de 32
    """
    if n < 1 or n % BLOCK_SIZE != 0:
        raise ValueError(f"Error de forma: la longitud {n} no es múltiplo de {BLOCK_SIZE}")


def _as_finite_float32(values: Sequence[float] | np.ndarray) -> np.ndarray:
    array = np.asarray(values, dtype=np.float32)
    if not np.all(np.isfinite(array)):
        raise ValueError("Entrada no finita: la cuantización requiere valores finitos")
    return array


def _quantize_q4_blocks(blocks: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """
    Núcleo vectorizado de Q4_0 sobre un array (..., 32) de float32.

    Returns:
        Tupla (escalas float32 con forma (...), códigos uint8 con forma (..., 32))
    """
    # El primer máximo de argmax resuelve empates hacia el índice más bajo
    idx = np.argmax(np.abs(blocks), axis=-1)
    max_signed = np.take_along_axis(blocks, idx[..., None], axis=-1)[..., 0]
    scales = (max_signed / np.float32(-Q4_OFFSET)).astype(np.float32)
    zero = max_signed == 0
    # Con máximos subnormales la división redondea: se sube un ulp para que |max/d| <= 8
    rounded_down = np.abs(max_signed) > np.abs(scales) * np.float32(Q4_OFFSET)
    away = np.copysign(np.float32(np.inf), -max_signed).astype(np.float32)
    scales = np.where(rounded_down, np.nextafter(scales, away), scales)
    scales = np.where(zero, np.float32(0), scales).astype(np.float32)

    safe = np.where(zero, np.float32(1), scales)[..., None]
    ratio = (blocks / safe).astype(np.float32)
    codes = np.floor(ratio + np.float32(Q4_OFFSET + 0.5))
    codes = np.clip(codes, 0, Q4_MAX_CODE).astype(np.uint8)
    codes[zero] = Q4_OFFSET
    return scales, codes


def _quantize_q8_blocks(blocks: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Núcleo vectorizado de Q8 sobre un array (..., 32) de float32."""
    amax = np.max(np.abs(blocks), axis=-1)
    scales = (amax / np.float32(Q8_MAX_CODE)).astype(np.float32)
    zero = amax == 0
    # Igual que en Q4: con amax subnormal la escala redondeada puede quedarse corta
    rounded_down = amax > scales * np.float32(Q8_MAX_CODE + 0.5)
    scales = np.where(rounded_down, np.nextafter(scales, np.float32(np.inf)), scales).astype(np.float32)

    safe = np.where(zero, np.float32(1), scales)[..., None]
    ratio = (blocks / safe).astype(np.float32)

    # Redondeo exacto con empates alejándose de cero: ratio - trunc(ratio) no redondea
    whole = np.trunc(ratio)
    frac = np.abs(ratio - whole)
    codes = whole + np.sign(ratio) * (frac >= np.float32(0.5))
    codes = np.clip(codes, -Q8_MAX_CODE, Q8_MAX_CODE).astype(np.int8)
    codes[zero] = 0
    return scales, codes


def quantize_block_q4(x: Sequence[float] | np.ndarray) -> BlockQ4:
    """
    Cuantiza 32 valores reales a un bloque Q4_0.

    La escala es el elemento de mayor magnitud (con signo) dividido entre -8,
    y cada código es clamp(floor(x/d + 8.5), 0, 15).

    Args:
        x: 32 valores finitos

    Returns:
        BlockQ4 cuantizado

    Raises:
        ValueError: Si la entrada no tiene 32 elementos o no es finita

    Examples:
        >>> quantize_block_q4([0.0] * 32).codes[0]
        8
    """
    array = _as_finite_float32(x)
    if array.shape != (BLOCK_SIZE,):
        raise ValueError(f"Error de forma: un bloque tiene {BLOCK_SIZE} elementos")
    scales, codes = _quantize_q4_blocks(array)
    return BlockQ4(scale=float(scales), codes=tuple(int(c) for c in codes))


def dequantize_block_q4(block: BlockQ4) -> np.ndarray:
    """Reconstruye los 32 valores de un bloque Q4: (code - 8) · scale."""
    codes = np.asarray(block.codes, dtype=np.float32)
    return ((codes - np.float32(Q4_OFFSET)) * np.float32(block.scale)).astype(np.float32)


def quantize_row_q4(row: Sequence[float] | np.ndarray) -> list[BlockQ4]:
    """
    Cuantiza una fila como bloques Q4 independientes de 32 elementos.

    Raises:
        ValueError: Si la longitud no es múltiplo de 32 o la entrada no es finita
    """
    array = _as_finite_float32(row)
    check_block_multiple(array.size)
    scales, codes = _quantize_q4_blocks(array.reshape(-1, BLOCK_SIZE))
    return [
        BlockQ4(scale=float(s), codes=tuple(int(c) for c in block))
        for s, block in zip(scales, codes)
    ]


def quantize_matrix_q4(values: np.ndarray, row_chunk: int = 1024) -> QuantMatrixQ4:
    """
    Cuantiza una matriz densa m×n fila a fila.

    Equivale bit a bit a aplicar quantize_row_q4 a cada fila; se procesa
    por tramos de filas para acotar la memoria temporal.

    Args:
        values: Matriz m×n de valores finitos
        row_chunk: Filas procesadas por tramo

    Returns:
        QuantMatrixQ4 resultante
    """
    array = _as_finite_float32(values)
    if array.ndim != 2:
        raise ValueError("Error de forma: se esperaba una matriz bidimensional")
    rows, cols = array.shape
    check_block_multiple(cols)
    n_blocks = cols // BLOCK_SIZE

    scales = np.empty((rows, n_blocks), dtype=np.float32)
    codes = np.empty((rows, n_blocks, BLOCK_SIZE), dtype=np.uint8)
    for start in range(0, rows, row_chunk):
        end = min(start + row_chunk, rows)
        chunk = array[start:end].reshape(end - start, n_blocks, BLOCK_SIZE)
        scales[start:end], codes[start:end] = _quantize_q4_blocks(chunk)
    return QuantMatrixQ4(rows=rows, cols=cols, scales=scales, codes=codes)


def dequantize_matrix_q4(matrix: QuantMatrixQ4) -> np.ndarray:
    """Reconstruye la matriz m×n en float32."""
    centered = matrix.codes.astype(np.float32) - np.float32(Q4_OFFSET)
    values = centered * matrix.scales[..., None]
    return values.reshape(matrix.rows, matrix.cols).astype(np.float32)


def quantize_q8_array(x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """
    Cuantiza en Q8 la última dimensión de un array (..., n).

    Cada vector de la última dimensión se cuantiza como quantize_vec_q8.

    Returns:
        Tupla (escalas (..., n/32), códigos (..., n/32, 32))
    """
    array = _as_finite_float32(x)
    check_block_multiple(array.shape[-1])
    blocks = array.reshape(*array.shape[:-1], -1, BLOCK_SIZE)
    return _quantize_q8_blocks(blocks)


def quantize_vec_q8(x: Sequence[float] | np.ndarray) -> QuantVectorQ8:
    """
    Cuantiza un vector fp32 a int8 con una escala por bloque de 32.

    Args:
        x: Vector de n valores finitos, n múltiplo de 32

    Returns:
        QuantVectorQ8 con escala max|x|/127 por bloque

    Raises:
        ValueError: Si la forma es inválida o la entrada no es finita
    """
    array = _as_finite_float32(x)
    if array.ndim != 1:
        raise ValueError("Error de forma: se esperaba un vector")
    scales, codes = quantize_q8_array(array)
    return QuantVectorQ8(length=array.size, scales=scales, codes=codes)


def dequantize_vec_q8(vector: QuantVectorQ8) -> np.ndarray:
    """Reconstruye los n valores: code · scale."""
    values = vector.codes.astype(np.float32) * vector.scales[:, None]
    return values.reshape(vector.length).astype(np.float32)


def encode_qmat(matrix: QuantMatrixQ4) -> bytes:
    """Serializa una matriz Q4 con el formato ``.qmat`` (little-endian)."""
    header = np.zeros(1, dtype=QMAT_HEADER)
    header['magic'] = QMAT_MAGIC
    header['version'] = QMAT_VERSION
    header['rows'] = matrix.rows
    header['cols'] = matrix.cols
    header['kind'] = QMAT_KIND_Q4_0

    blocks = np.zeros(matrix.rows * matrix.blocks_per_row, dtype=QMAT_BLOCK)
    codes = matrix.codes.reshape(-1, BLOCK_SIZE)
    blocks['scale'] = matrix.scales.reshape(-1)
    # Byte j: código 2j en el nibble bajo, código 2j+1 en el alto
    blocks['qs'] = codes[:, 0::2] | (codes[:, 1::2] << 4)
    return header.tobytes() + blocks.tobytes()


def decode_qmat(payload: bytes) -> QuantMatrixQ4:
    """
    Deserializa un contenedor ``.qmat`` validando cabecera y bloques.

    Raises:
        ValueError: Si la cabecera, la longitud o algún bloque son inválidos
    """
    if len(payload) < QMAT_HEADER.itemsize:
        raise ValueError("Contenedor .qmat truncado: cabecera incompleta")
    header = np.frombuffer(payload, dtype=QMAT_HEADER, count=1)[0]
    if header['magic'] != QMAT_MAGIC:
        raise ValueError("Contenedor .qmat inválido: magic incorrecto")
    if int(header['version']) != QMAT_VERSION:
        raise ValueError(f"Versión .qmat no soportada: {int(header['version'])}")
    if int(header['kind']) != QMAT_KIND_Q4_0:
        raise ValueError(f"Tipo de bloque no soportado: {int(header['kind'])}")
    if np.any(header['reserved']):
        raise ValueError("Contenedor .qmat inválido: bytes reservados no nulos")

    rows, cols = int(header['rows']), int(header['cols'])
    if rows < 1:
        raise ValueError("Contenedor .qmat inválido: número de filas nulo")
    check_block_multiple(cols)
    n_blocks = rows * (cols // BLOCK_SIZE)
    expected = QMAT_HEADER.itemsize + n_blocks * QMAT_BLOCK.itemsize
    if len(payload) != expected:
        raise ValueError(f"Contenedor .qmat con {len(payload)} bytes, se esperaban {expected}")

    blocks = np.frombuffer(payload, dtype=QMAT_BLOCK, offset=QMAT_HEADER.itemsize)
    codes = np.empty((n_blocks, BLOCK_SIZE), dtype=np.uint8)
    codes[:, 0::2] = blocks['qs'] & 0x0F
    codes[:, 1::2] = blocks['qs'] >> 4
    scales = blocks['scale'].astype(np.float32)

    if not np.all(np.isfinite(scales)):
        raise ValueError("Contenedor .qmat inválido: escala no finita")
    zero = scales == 0
    if np.any(codes[zero] != Q4_OFFSET):
        raise ValueError("Contenedor .qmat inválido: bloque de escala 0 con códigos distintos de 8")

    n_per_row = cols // BLOCK_SIZE
    return QuantMatrixQ4(
        rows=rows,
        cols=cols,
        scales=scales.reshape(rows, n_per_row),
        codes=codes.reshape(rows, n_per_row, BLOCK_SIZE)
    )


def write_qmat(matrix: QuantMatrixQ4, path: PathType) -> Path:
    """
    Escribe una matriz Q4 en un fichero ``.qmat``.

    Raises:
        OSError: Si no se puede escribir el fichero (incluye la ruta)
    """
    file_path = Path(path)
    try:
        file_path.write_bytes(encode_qmat(matrix))
    except OSError as e:
        raise OSError(f"Error al escribir {file_path}: {e}") from e
    return file_path


def read_qmat(path: PathType) -> QuantMatrixQ4:
    """
    Lee una matriz Q4 de un fichero ``.qmat``.

    Raises:
        FileNotFoundError: Si el fichero no existe
        OSError: Para otros errores de sistema (incluye la ruta)
        ValueError: Si el contenido no es un contenedor válido
    """
    file_path = Path(path)
    try:
        payload = file_path.read_bytes()
    except FileNotFoundError as e:
        raise FileNotFoundError(f"Archivo no encontrado: {file_path}") from e
    except OSError as e:
        raise OSError(f"Error de sistema al acceder al archivo {file_path}: {e}") from e

    try:
        return decode_qmat(payload)
    except ValueError as e:
        raise ValueError(f"{file_path}: {e}") from e
