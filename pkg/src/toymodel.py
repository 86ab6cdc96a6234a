"""
Módulo del decodificador sintético.

Un transformer decodificador con pesos aleatorios cuantizados en Q4 que
ejercita los kernels en los dos regímenes medidos: prefill (GEMM fina sobre
el prompt) y generación de tokens (una GEMV por token), e informa de los
tokens por segundo de cada fase.
"""

import time
from contextlib import contextmanager
from dataclasses import dataclass, field
from os import PathLike
from pathlib import Path
from typing import Callable, Final, Iterator, Optional, TypeAlias
import numpy as np
from src.kernels import ThinMatrix, gemm_thin, gemv_quantizing
from src.parallel import NumaPolicy, RowParallelExecutor
from src.quant import BLOCK_SIZE, QuantMatrixQ4, quantize_matrix_q4, read_qmat, write_qmat
from src.utils import make_rng

# Type aliases
PathType: TypeAlias = str | PathLike[str] | Path
Timer: TypeAlias = Callable[[], float]

# Constantes del modelo
HEAD_DIM: Final[int] = 64
RMS_EPS: Final[np.float32] = np.float32(1e-6)
DEFAULT_PROMPT_LEN: Final[int] = 22
DEFAULT_GEN_TOKENS: Final[int] = 256
INITIAL_CACHE_CAPACITY: Final[int] = 512
MANIFEST_NAME: Final[str] = 'manifest.txt'

# Identificadores de flujo aleatorio
WEIGHT_STREAM: Final[int] = 0
EMBED_STREAM: Final[int] = 1

ATTENTION_MATRICES: Final[tuple[str, ...]] = ('w_q', 'w_k', 'w_v', 'w_o')
MLP_MATRICES: Final[tuple[str, ...]] = ('w_up', 'w_gate', 'w_down')
MATRIX_NAMES: Final[tuple[str, ...]] = ATTENTION_MATRICES + MLP_MATRICES


@dataclass(frozen=True)
class LayerShapes:
    """Dimensiones del modelo: anchura, anchura del MLP y número de capas."""
    d_model: int
    d_ff: int
    n_layers: int

    def __post_init__(self) -> None:
        if self.d_model < BLOCK_SIZE or self.d_model % BLOCK_SIZE != 0:
            raise ValueError(f"d_model debe ser múltiplo positivo de {BLOCK_SIZE}: {self.d_model}")
        if self.d_ff < BLOCK_SIZE or self.d_ff % BLOCK_SIZE != 0:
            raise ValueError(f"d_ff debe ser múltiplo positivo de {BLOCK_SIZE}: {self.d_ff}")
        if self.n_layers < 1:
            raise ValueError(f"n_layers debe ser al menos 1: {self.n_layers}")

    @property
    def n_heads(self) -> int:
        """Cabezas de atención de dimensión 64, o una sola si no encaja."""
        return self.d_model // HEAD_DIM if self.d_model % HEAD_DIM == 0 else 1

    def matrix_shapes(self) -> dict[str, tuple[int, int]]:
        """Forma (filas, columnas) de cada matriz de una capa."""
        square = (self.d_model, self.d_model)
        return {
            'w_q': square,
            'w_k': square,
            'w_v': square,
            'w_o': square,
            'w_up': (self.d_ff, self.d_model),
            'w_gate': (self.d_ff, self.d_model),
            'w_down': (self.d_model, self.d_ff),
        }

    @property
    def weights_per_token(self) -> int:
        """Pesos de capas lineales que recorre cada token."""
        per_layer = sum(rows * cols for rows, cols in self.matrix_shapes().values())
        return per_layer * self.n_layers


PRESETS: Final[dict[str, LayerShapes]] = {
    'toy': LayerShapes(512, 1376, 2),
    'llama7b-layer': LayerShapes(4096, 11008, 1),
    'llama8b-layer': LayerShapes(4096, 14336, 1),
    'qwen14b-layer': LayerShapes(5120, 13824, 1),
}


def get_preset(name: str) -> LayerShapes:
    """
    Devuelve las dimensiones de un preset por nombre.

    Raises:
        ValueError: Si el preset no existe
    """
    if name not in PRESETS:
        raise ValueError(f"Preset desconocido '{name}'. Opciones: {', '.join(PRESETS)}")
    return PRESETS[name]


@dataclass(eq=False)
class KVCache:
    """Caché fp32 de claves y valores de una capa, con crecimiento por duplicación."""
    width: int
    keys: np.ndarray = field(init=False)
    values: np.ndarray = field(init=False)
    length: int = 0

    def __post_init__(self) -> None:
        self.keys = np.zeros((INITIAL_CACHE_CAPACITY, self.width), dtype=np.float32)
        self.values = np.zeros((INITIAL_CACHE_CAPACITY, self.width), dtype=np.float32)

    def append(self, key: np.ndarray, value: np.ndarray) -> None:
        """Añade la clave y el valor de un token."""
        if self.length == self.keys.shape[0]:
            capacity = 2 * self.keys.shape[0]
            for name in ('keys', 'values'):
                grown = np.zeros((capacity, self.width), dtype=np.float32)
                grown[:self.length] = getattr(self, name)
                setattr(self, name, grown)
        self.keys[self.length] = key
        self.values[self.length] = value
        self.length += 1

    def view(self) -> tuple[np.ndarray, np.ndarray]:
        """Claves y valores de los tokens procesados."""
        return self.keys[:self.length], self.values[:self.length]

    def clear(self) -> None:
        """Vacía la caché conservando la memoria reservada."""
        self.length = 0


@dataclass(eq=False)
class DecoderLayer:
    """Pesos Q4 de una capa y su caché KV."""
    weights: dict[str, QuantMatrixQ4]
    cache: KVCache


@dataclass(eq=False)
class ToyDecoder:
    """
    Decodificador sintético.

    Attributes:
        shapes: Dimensiones del modelo
        seed: Semilla de pesos y embeddings
        layers: Capas con sus pesos y caché
        name: Nombre del preset o 'custom'
        position: Tokens procesados en la secuencia actual
        prefilled: Si ya se ejecutó el prefill
        last_hidden: Estado oculto del último token procesado
    """
    shapes: LayerShapes
    seed: int
    layers: list[DecoderLayer]
    name: str = 'custom'
    position: int = 0
    prefilled: bool = False
    last_hidden: Optional[np.ndarray] = None


@dataclass
class PhaseStats:
    """Tiempos de una fase (prefill o generación)."""
    phase: str
    tokens: int
    step_seconds: list[float] = field(default_factory=list)

    @property
    def seconds(self) -> float:
        """Tiempo total: suma de los tiempos de cada paso."""
        return float(sum(self.step_seconds))

    @property
    def tokens_per_second(self) -> float:
        """
        Tokens por segundo de la fase.

        Raises:
            ValueError: Si no hay tokens o el tiempo es nulo
        """
        if self.tokens == 0 or self.seconds <= 0:
            raise ValueError(f"No se puede calcular tokens/s de la fase {self.phase} sin tokens ni tiempo")
        return self.tokens / self.seconds


def token_embedding(seed: int, position: int, d_model: int) -> np.ndarray:
    """Embedding pseudoaleatorio determinista del token en ``position``."""
    return make_rng(seed, EMBED_STREAM, position).standard_normal(d_model, dtype=np.float32)


def build_toy_decoder(shapes: LayerShapes, seed: int, name: str = 'custom') -> ToyDecoder:
    """
    Construye un decodificador con pesos gaussianos cuantizados en Q4.

    Los pesos siguen N(0, σ) con σ = 1/√d_model; la misma semilla produce
    un modelo idéntico bit a bit.

    Args:
        shapes: Dimensiones del modelo
        seed: Semilla
        name: Nombre del preset

    Returns:
        ToyDecoder con la caché vacía
    """
    std = np.float32(1.0 / np.sqrt(shapes.d_model))
    layers = []
    for layer_index in range(shapes.n_layers):
        weights = {}
        for matrix_index, (matrix_name, (rows, cols)) in enumerate(shapes.matrix_shapes().items()):
            rng = make_rng(seed, WEIGHT_STREAM, layer_index, matrix_index)
            values = rng.standard_normal((rows, cols), dtype=np.float32) * std
            weights[matrix_name] = quantize_matrix_q4(values)
        layers.append(DecoderLayer(weights=weights, cache=KVCache(shapes.d_model)))
    return ToyDecoder(shapes=shapes, seed=seed, layers=layers, name=name)


def reset(model: ToyDecoder) -> None:
    """Vacía las cachés KV y vuelve a la posición 0."""
    for layer in model.layers:
        layer.cache.clear()
    model.position = 0
    model.prefilled = False
    model.last_hidden = None


def _rms_norm(vector: np.ndarray) -> np.ndarray:
    mean_square = np.mean(vector * vector, dtype=np.float32)
    return (vector / np.sqrt(mean_square + RMS_EPS)).astype(np.float32)


def _silu(vector: np.ndarray) -> np.ndarray:
    return (vector / (np.float32(1) + np.exp(-vector))).astype(np.float32)


def _per_row(fn: Callable[[np.ndarray], np.ndarray], matrix: np.ndarray) -> np.ndarray:
    # Cada token se procesa como vector propio: mismo cálculo en prefill y generación
    return np.stack([fn(np.ascontiguousarray(row)) for row in matrix])


def _attend(query: np.ndarray, keys: np.ndarray, values: np.ndarray, n_heads: int) -> np.ndarray:
    """Atención causal multicabeza fp32 de un token sobre la caché."""
    tokens, width = keys.shape
    head_dim = width // n_heads
    scale = np.float32(1.0 / np.sqrt(head_dim))

    q = query.reshape(n_heads, head_dim)
    k = keys.reshape(tokens, n_heads, head_dim)
    v = values.reshape(tokens, n_heads, head_dim)

    scores = (k * q[None, :, :]).sum(axis=-1) * scale
    scores = scores - scores.max(axis=0)
    weights = np.exp(scores)
    weights = weights / weights.sum(axis=0)
    return (weights[:, :, None] * v).sum(axis=0).reshape(width).astype(np.float32)


def _linear(matrix: QuantMatrixQ4, inputs: np.ndarray,
            executor: Optional[RowParallelExecutor]) -> np.ndarray:
    """Aplica una capa lineal a b tokens: GEMV si b == 1, GEMM fina si b > 1."""
    if inputs.shape[0] == 1:
        if executor is not None:
            out = executor.gemv(matrix, inputs[0])
        else:
            out = gemv_quantizing(matrix, inputs[0])
        return out[None, :]

    thin = ThinMatrix.from_columns(inputs)
    out = executor.gemm_thin(matrix, thin) if executor is not None else gemm_thin(matrix, thin)
    return np.ascontiguousarray(out.T)


def _forward(model: ToyDecoder, inputs: np.ndarray,
             executor: Optional[RowParallelExecutor]) -> np.ndarray:
    """Pasa b tokens consecutivos por todas las capas y llena la caché KV."""
    hidden = np.array(inputs, dtype=np.float32)
    n_heads = model.shapes.n_heads

    for layer in model.layers:
        w = layer.weights
        normed = _per_row(_rms_norm, hidden)
        queries = _linear(w['w_q'], normed, executor)
        keys = _linear(w['w_k'], normed, executor)
        values = _linear(w['w_v'], normed, executor)

        attended = np.empty_like(queries)
        for t in range(hidden.shape[0]):
            layer.cache.append(keys[t], values[t])
            cached_keys, cached_values = layer.cache.view()
            attended[t] = _attend(queries[t], cached_keys, cached_values, n_heads)
        hidden = hidden + _linear(w['w_o'], attended, executor)

        normed = _per_row(_rms_norm, hidden)
        gate = _linear(w['w_gate'], normed, executor)
        up = _linear(w['w_up'], normed, executor)
        activated = _per_row(_silu, gate) * up
        hidden = hidden + _linear(w['w_down'], activated, executor)

    model.position += hidden.shape[0]
    return hidden


@contextmanager
def _executor_scope(n_threads: int, policy: NumaPolicy,
                    executor: Optional[RowParallelExecutor]) -> Iterator[Optional[RowParallelExecutor]]:
    if executor is not None or n_threads == 1:
        yield executor
        return
    with RowParallelExecutor(n_threads, policy) as pool:
        yield pool


def prefill(model: ToyDecoder, prompt_len: int = DEFAULT_PROMPT_LEN, n_threads: int = 1,
            policy: NumaPolicy = NumaPolicy.ALL_OFF,
            executor: Optional[RowParallelExecutor] = None,
            timer: Timer = time.perf_counter) -> tuple[np.ndarray, PhaseStats]:
    """
    Procesa un prompt de ``prompt_len`` tokens en una sola pasada.

    Cada capa lineal se ejecuta como GEMM fina con b = prompt_len (GEMV si
    b = 1). Empieza siempre una secuencia nueva: vacía la caché antes.

    Args:
        model: Decodificador
        prompt_len: Tokens del prompt (por defecto 22)
        n_threads: Hilos para las capas lineales
        policy: Política de ubicación si se crea un pool temporal
        executor: Pool ya creado (el tiempo de creación queda fuera de la medida)
        timer: Reloj monótono

    Returns:
        Tupla (estados ocultos (prompt_len, d_model), PhaseStats)

    Raises:
        ValueError: Si prompt_len < 1
    """
    if prompt_len < 1:
        raise ValueError(f"prompt_len debe ser al menos 1: {prompt_len}")
    reset(model)
    d_model = model.shapes.d_model
    embeddings = np.stack([token_embedding(model.seed, p, d_model) for p in range(prompt_len)])

    with _executor_scope(n_threads, policy, executor) as pool:
        start = timer()
        hidden = _forward(model, embeddings, pool)
        elapsed = timer() - start

    model.prefilled = True
    model.last_hidden = hidden[-1].copy()
    return hidden, PhaseStats(phase='prefill', tokens=prompt_len, step_seconds=[elapsed])


def generate(model: ToyDecoder, n_tokens: int = DEFAULT_GEN_TOKENS, n_threads: int = 1,
             policy: NumaPolicy = NumaPolicy.ALL_OFF,
             executor: Optional[RowParallelExecutor] = None,
             timer: Timer = time.perf_counter) -> PhaseStats:
    """
    Genera ``n_tokens`` tokens de uno en uno con GEMV por capa lineal.

    No hay muestreo: la entrada de cada paso es el embedding determinista de
    su posición.

    Returns:
        PhaseStats con el tiempo de cada paso

    Raises:
        RuntimeError: Si no se ha ejecutado el prefill
        ValueError: Si n_tokens es negativo
    """
    if not model.prefilled:
        raise RuntimeError("Error de estado: hay que ejecutar prefill antes de generar")
    if n_tokens < 0:
        raise ValueError(f"n_tokens no puede ser negativo: {n_tokens}")

    stats = PhaseStats(phase='generate', tokens=n_tokens)
    d_model = model.shapes.d_model
    with _executor_scope(n_threads, policy, executor) as pool:
        for _ in range(n_tokens):
            embedding = token_embedding(model.seed, model.position, d_model)[None, :]
            start = timer()
            hidden = _forward(model, embedding, pool)
            stats.step_seconds.append(timer() - start)
            model.last_hidden = hidden[0].copy()
    return stats


def export_model(model: ToyDecoder, directory: PathType) -> Path:
    """
    Exporta los pesos como ficheros ``.qmat`` y un manifiesto de texto.

    Returns:
        Ruta del manifiesto escrito

    Raises:
        OSError: Si no se puede escribir en el directorio
    """
    out_dir = Path(directory)
    try:
        out_dir.mkdir(parents=True, exist_ok=True)
    except OSError as e:
        raise OSError(f"No se puede crear el directorio {out_dir}: {e}") from e

    lines = [
        f"name {model.name}",
        f"d_model {model.shapes.d_model}",
        f"d_ff {model.shapes.d_ff}",
        f"n_layers {model.shapes.n_layers}",
        f"seed {model.seed}",
    ]
    for index, layer in enumerate(model.layers):
        for matrix_name in MATRIX_NAMES:
            matrix = layer.weights[matrix_name]
            key = f"layer{index}.{matrix_name}"
            write_qmat(matrix, out_dir / f"{key}.qmat")
            lines.append(f"matrix {key} {matrix.rows} {matrix.cols} {key}.qmat")

    manifest = out_dir / MANIFEST_NAME
    try:
        manifest.write_text('\n'.join(lines) + '\n', encoding='utf-8')
    except OSError as e:
        raise OSError(f"Error al escribir {manifest}: {e}") from e
    print(f"\nModelo exportado en: {out_dir} ({len(lines) - 5} matrices)")
    return manifest


def load_exported(directory: PathType) -> ToyDecoder:
    """
    Reconstruye un decodificador a partir de un directorio exportado.

    Raises:
        FileNotFoundError: Si falta el manifiesto o algún fichero
        ValueError: Si el manifiesto o las matrices son inconsistentes
    """
    in_dir = Path(directory)
    manifest = in_dir / MANIFEST_NAME
    try:
        text = manifest.read_text(encoding='utf-8')
    except FileNotFoundError as e:
        raise FileNotFoundError(f"Archivo no encontrado: {manifest}") from e

    fields: dict[str, str] = {}
    matrices: dict[str, QuantMatrixQ4] = {}
    for line in text.splitlines():
        parts = line.split()
        if not parts:
            continue
        if parts[0] == 'matrix' and len(parts) == 5:
            key, rows, cols, file_name = parts[1], int(parts[2]), int(parts[3]), parts[4]
            matrix = read_qmat(in_dir / file_name)
            if (matrix.rows, matrix.cols) != (rows, cols):
                raise ValueError(f"La matriz {key} no tiene la forma del manifiesto")
            matrices[key] = matrix
        elif len(parts) == 2:
            fields[parts[0]] = parts[1]
        else:
            raise ValueError(f"Línea de manifiesto inválida: '{line}'")

    try:
        shapes = LayerShapes(int(fields['d_model']), int(fields['d_ff']), int(fields['n_layers']))
        seed = int(fields['seed'])
    except KeyError as e:
        raise ValueError(f"Falta el campo {e} en el manifiesto") from e

    layers = []
    for index in range(shapes.n_layers):
        weights = {}
        for matrix_name, shape in shapes.matrix_shapes().items():
            key = f"layer{index}.{matrix_name}"
            if key not in matrices or (matrices[key].rows, matrices[key].cols) != shape:
                raise ValueError(f"Falta la matriz {key} o su forma no es {shape}")
            weights[matrix_name] = matrices[key]
        layers.append(DecoderLayer(weights=weights, cache=KVCache(shapes.d_model)))
    return ToyDecoder(shapes=shapes, seed=seed, layers=layers, name=fields.get('name', 'custom'))
