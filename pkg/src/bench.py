"""
Módulo del arnés de benchmarks.

Reproduce a escala de escritorio los tres experimentos: barrido de tamaños
de GEMV, barrido de hilos y barrido de políticas NUMA sobre el decodificador
sintético. Los resultados se emiten como CSV y como tablas de resumen.
"""

import math
import os
import platform
import time
from dataclasses import dataclass, field
from os import PathLike
from pathlib import Path
from typing import Callable, Final, Optional, Sequence, TypeAlias
import numpy as np
import pandas as pd
from src.kernels import gemv_naive_baseline, gemv_quantizing
from src.parallel import NumaPolicy, RowParallelExecutor
from src.quant import BLOCK_SIZE, quantize_matrix_q4
from src.toymodel import (
    DEFAULT_GEN_TOKENS,
    DEFAULT_PROMPT_LEN,
    LayerShapes,
    build_toy_decoder,
    generate,
    prefill,
)
from src.utils import TableConfig, display_table, make_rng

# Type aliases
DataFrame: TypeAlias = pd.DataFrame
PathType: TypeAlias = str | PathLike[str] | Path
Timer: TypeAlias = Callable[[], float]

# Esquema CSV
CSV_COLUMNS: Final[list[str]] = [
    'kernel', 'm', 'n', 'batch', 'threads', 'policy', 'reps',
    'seconds_mean', 'seconds_min', 'gops', 'warnings'
]
CSV_HEADER: Final[str] = ','.join(CSV_COLUMNS)
CSV_FLOAT_FORMAT: Final[str] = '%.9g'
# Tolerancia relativa de gops frente a seconds_min (el CSV guarda 9 cifras)
GOPS_REL_TOL: Final[float] = 1e-6
WARNING_SEPARATOR: Final[str] = ';'

# Nombres de kernel y de fase en los registros
KERNEL_QUANTIZING: Final[str] = 'gemv_quantizing'
KERNEL_BASELINE: Final[str] = 'gemv_naive_baseline'
PHASE_PREFILL: Final[str] = 'prefill'
PHASE_GENERATE: Final[str] = 'generate'

# Valores por defecto y umbrales
DEFAULT_SIZES: Final[tuple[int, ...]] = (256, 512, 1024, 2048, 4096)
DEFAULT_REPS: Final[int] = 10
DEFAULT_WARMUP: Final[int] = 3
DEFAULT_SEED: Final[int] = 42
SPEEDUP_FLOOR: Final[float] = 1.0
SPEEDUP_TARGET: Final[float] = 1.3
SPEEDUP_MIN_SIZE: Final[int] = 1024


def default_thread_counts() -> list[int]:
    """Potencias de dos hasta el número de CPUs del host, más el propio número."""
    cpus = os.cpu_count() or 1
    counts = []
    t = 1
    while t < cpus:
        counts.append(t)
        t *= 2
    counts.append(cpus)
    return counts


@dataclass
class BenchRecord:
    """
    Una fila de medida.

    Attributes:
        kernel: Kernel o fase medida
        m, n, batch: Forma del trabajo (2·m·n·batch operaciones)
        threads: Hilos usados
        policy: Nombre de la política NUMA
        reps: Repeticiones medidas
        seconds_mean: Tiempo medio por repetición
        seconds_min: Tiempo mínimo por repetición
        gops: 2·m·n·batch / (seconds_min·10⁹)
        warning_flags: Avisos de ubicación o de la medida
    """
    kernel: str
    m: int
    n: int
    batch: int
    threads: int
    policy: str
    reps: int
    seconds_mean: float
    seconds_min: float
    gops: float
    warning_flags: tuple[str, ...] = ()

    def __post_init__(self) -> None:
        if self.reps < 1:
            raise ValueError(f"reps debe ser al menos 1: {self.reps}")
        if self.seconds_min > self.seconds_mean:
            raise ValueError("seconds_min no puede superar a seconds_mean")
        if self.seconds_min <= 0:
            raise ValueError(f"seconds_min no positivo: {self.seconds_min}")
        expected = operation_count(self.m, self.n, self.batch) / (self.seconds_min * 1e9)
        if not math.isclose(self.gops, expected, rel_tol=GOPS_REL_TOL):
            raise ValueError(
                f"gops incoherente: {self.gops}, se esperaba 2·m·n·batch/(seconds_min·1e9) = {expected}"
            )

    @classmethod
    def measured(cls, kernel: str, m: int, n: int, batch: int, threads: int,
                 policy: str, timings: Sequence[float],
                 warning_flags: Sequence[str] = ()) -> 'BenchRecord':
        """
        Construye un registro a partir de los tiempos de cada repetición.

        Raises:
            ValueError: Si no hay tiempos o el mínimo no es positivo
        """
        if not timings:
            raise ValueError("Se necesita al menos un tiempo medido")
        seconds_min = float(min(timings))
        if seconds_min <= 0:
            raise ValueError(f"Tiempo mínimo no positivo: {seconds_min}")
        seconds_mean = max(float(np.mean(timings)), seconds_min)
        return cls(
            kernel=kernel,
            m=m,
            n=n,
            batch=batch,
            threads=threads,
            policy=policy,
            reps=len(timings),
            seconds_mean=seconds_mean,
            seconds_min=seconds_min,
            gops=operation_count(m, n, batch) / (seconds_min * 1e9),
            warning_flags=tuple(warning_flags)
        )

    def to_row(self) -> dict:
        """Fila con las columnas del CSV."""
        return {
            'kernel': self.kernel,
            'm': self.m,
            'n': self.n,
            'batch': self.batch,
            'threads': self.threads,
            'policy': self.policy,
            'reps': self.reps,
            'seconds_mean': self.seconds_mean,
            'seconds_min': self.seconds_min,
            'gops': self.gops,
            'warnings': WARNING_SEPARATOR.join(self.warning_flags),
        }


@dataclass
class SweepConfig:
    """Configuración de un barrido."""
    sizes: list[int] = field(default_factory=lambda: list(DEFAULT_SIZES))
    threads: list[int] = field(default_factory=default_thread_counts)
    policies: list[NumaPolicy] = field(default_factory=lambda: [NumaPolicy.MEMORY_INTERLEAVE])
    reps: int = DEFAULT_REPS
    warmup: int = DEFAULT_WARMUP
    seed: int = DEFAULT_SEED

    def __post_init__(self) -> None:
        if not self.sizes or not self.threads or not self.policies:
            raise ValueError("Las listas de tamaños, hilos y políticas no pueden estar vacías")
        bad_sizes = [s for s in self.sizes if s < 1 or s % BLOCK_SIZE != 0]
        if bad_sizes:
            raise ValueError(f"Tamaños que no son múltiplo de {BLOCK_SIZE}: {bad_sizes}")
        if any(t < 1 for t in self.threads):
            raise ValueError(f"Número de hilos no positivo en {self.threads}")
        if self.reps < 1:
            raise ValueError(f"reps debe ser al menos 1: {self.reps}")
        if self.warmup < 0:
            raise ValueError(f"warmup no puede ser negativo: {self.warmup}")


def operation_count(m: int, n: int, batch: int = 1) -> int:
    """Operaciones de un producto: 2·m·n por columna (multiplicación y suma)."""
    return 2 * m * n * batch


def time_kernel(fn: Callable[[], object], reps: int, warmup: int,
                timer: Timer = time.perf_counter) -> list[float]:
    """
    Mide ``reps`` ejecuciones de ``fn`` tras ``warmup`` ejecuciones sin medir.

    El reloj envuelve solo la llamada.

    Returns:
        Lista con el tiempo de cada repetición medida
    """
    for _ in range(warmup):
        fn()
    timings = []
    for _ in range(reps):
        start = timer()
        fn()
        timings.append(timer() - start)
    return timings


def sweep_sizes(cfg: SweepConfig, timer: Timer = time.perf_counter) -> list[BenchRecord]:
    """
    Barrido de tamaños con un hilo: kernel propuesto frente al baseline.

    Para cada tamaño s se generan A (s×s) y x con semilla; el tiempo del
    kernel incluye la cuantización de x.

    Args:
        cfg: Configuración del barrido
        timer: Reloj monótono

    Returns:
        Dos registros por tamaño (kernel y baseline)
    """
    print("\n=== Barrido de tamaños GEMV ===")
    records = []
    for size in cfg.sizes:
        rng = make_rng(cfg.seed, size)
        matrix = quantize_matrix_q4(rng.standard_normal((size, size), dtype=np.float32))
        x = rng.standard_normal(size, dtype=np.float32)

        kernels: list[tuple[str, Callable[[], object]]] = [
            (KERNEL_QUANTIZING, lambda: gemv_quantizing(matrix, x)),
            (KERNEL_BASELINE, lambda: gemv_naive_baseline(matrix, x)),
        ]
        for name, fn in kernels:
            timings = time_kernel(fn, cfg.reps, cfg.warmup, timer)
            record = BenchRecord.measured(
                name, size, size, 1, 1, NumaPolicy.ALL_OFF.value, timings
            )
            records.append(record)
            print(f"  {name:<22} s={size:<6} {record.gops:10.4f} GOPS")
    return records


def sweep_threads(cfg: SweepConfig, shapes: LayerShapes,
                  prompt_len: int = DEFAULT_PROMPT_LEN,
                  n_tokens: int = DEFAULT_GEN_TOKENS,
                  timer: Timer = time.perf_counter) -> list[BenchRecord]:
    """
    Barrido de hilos × políticas sobre el decodificador sintético.

    Para cada combinación se crea un pool (fuera de la medida) y se ejecutan
    prefill y generación. Los registros de fase usan m = pesos por token,
    n = 1 y batch = tokens, así que los GOPS cuentan el trabajo lineal.

    Returns:
        Un registro por (fase, hilos, política)

    Raises:
        ValueError: Si prompt_len o n_tokens no son positivos
    """
    if prompt_len < 1 or n_tokens < 1:
        raise ValueError("prompt_len y n_tokens deben ser positivos")

    print("\n=== Barrido de hilos y políticas ===")
    model = build_toy_decoder(shapes, cfg.seed)
    weights = shapes.weights_per_token
    records = []
    for threads in cfg.threads:
        for policy in cfg.policies:
            with RowParallelExecutor(threads, policy) as pool:
                print(pool.report.summary())
                prefill_times, generate_times = [], []
                for rep in range(cfg.warmup + cfg.reps):
                    _, prefill_stats = prefill(model, prompt_len, executor=pool, timer=timer)
                    generate_stats = generate(model, n_tokens, executor=pool, timer=timer)
                    if rep >= cfg.warmup:
                        prefill_times.append(prefill_stats.seconds)
                        generate_times.append(generate_stats.seconds)
                flags = pool.report.warning_flags

            for phase, batch, timings in (
                (PHASE_PREFILL, prompt_len, prefill_times),
                (PHASE_GENERATE, n_tokens, generate_times),
            ):
                records.append(BenchRecord.measured(
                    phase, weights, 1, batch, threads, policy.value, timings, flags
                ))
    return records


def records_to_frame(records: Sequence[BenchRecord]) -> DataFrame:
    """Convierte los registros en un DataFrame con las columnas del CSV."""
    return pd.DataFrame([r.to_row() for r in records], columns=CSV_COLUMNS)


def toolchain_comment() -> str:
    """Describe la cadena de herramientas para la línea de comentario del CSV."""
    return (
        f"toolchain python={platform.python_version()} "
        f"compiler={platform.python_compiler().replace(',', ' ')} "
        f"numpy={np.__version__} pandas={pd.__version__} machine={platform.machine()}"
    )


def emit_csv(records: Sequence[BenchRecord], path: PathType,
             comment: Optional[str] = None) -> Path:
    """
    Escribe los registros en CSV con cabecera fija y reales de 9 cifras.

    Args:
        records: Registros en el orden de salida
        path: Fichero destino
        comment: Línea opcional de comentario previa a la cabecera

    Returns:
        Ruta del fichero escrito

    Raises:
        OSError: Si no se puede escribir (incluye la ruta)
    """
    file_path = Path(path)
    frame = records_to_frame(records)
    try:
        with open(file_path, 'w', encoding='utf-8', newline='') as f:
            if comment:
                f.write(f"# {comment}\n")
            frame.to_csv(f, index=False, float_format=CSV_FLOAT_FORMAT, lineterminator='\n')
    except OSError as e:
        raise OSError(f"Error al escribir {file_path}: {e}") from e
    return file_path


def parse_csv(path: PathType) -> list[BenchRecord]:
    """
    Lee un CSV emitido por emit_csv.

    Raises:
        FileNotFoundError: Si el fichero no existe
        ValueError: Si la cabecera no coincide con el esquema
    """
    file_path = Path(path)
    try:
        frame = pd.read_csv(
            file_path,
            comment='#',
            keep_default_na=False,
            dtype={'kernel': str, 'policy': str, 'warnings': str}
        )
    except FileNotFoundError as e:
        raise FileNotFoundError(f"Archivo no encontrado: {file_path}") from e
    except pd.errors.EmptyDataError as e:
        raise ValueError(f"{file_path}: CSV vacío, falta la cabecera") from e

    if list(frame.columns) != CSV_COLUMNS:
        raise ValueError(f"{file_path}: cabecera inesperada {list(frame.columns)}")

    return [
        BenchRecord(
            kernel=row['kernel'],
            m=int(row['m']),
            n=int(row['n']),
            batch=int(row['batch']),
            threads=int(row['threads']),
            policy=row['policy'],
            reps=int(row['reps']),
            seconds_mean=float(row['seconds_mean']),
            seconds_min=float(row['seconds_min']),
            gops=float(row['gops']),
            warning_flags=tuple(w for w in row['warnings'].split(WARNING_SEPARATOR) if w)
        )
        for row in frame.to_dict('records')
    ]


def speedup_status(speedup: float) -> str:
    """Clasifica una aceleración: 'ok' (≥ 1.3), 'warn' ([1.0, 1.3)) o 'fail' (< 1.0)."""
    if speedup < SPEEDUP_FLOOR:
        return 'fail'
    if speedup < SPEEDUP_TARGET:
        return 'warn'
    return 'ok'


def speedup_report(records: Sequence[BenchRecord]) -> DataFrame:
    """
    Aceleración del kernel frente al baseline por tamaño.

    Solo los tamaños ≥ 1024 se clasifican; el resto se marca con '-'.

    Returns:
        DataFrame con size, gops_kernel, gops_baseline, speedup y status
    """
    frame = records_to_frame(records)
    kernel = frame[frame['kernel'] == KERNEL_QUANTIZING].set_index('n')['gops']
    baseline = frame[frame['kernel'] == KERNEL_BASELINE].set_index('n')['gops']
    sizes = sorted(set(kernel.index) & set(baseline.index))

    rows = []
    for size in sizes:
        speedup = kernel[size] / baseline[size]
        rows.append({
            'size': size,
            'gops_kernel': kernel[size],
            'gops_baseline': baseline[size],
            'speedup': speedup,
            'status': speedup_status(speedup) if size >= SPEEDUP_MIN_SIZE else '-',
        })
    return pd.DataFrame(rows, columns=['size', 'gops_kernel', 'gops_baseline', 'speedup', 'status'])


def phase_report(records: Sequence[BenchRecord]) -> DataFrame:
    """Tokens por segundo de cada fase, hilo y política (tokens / seconds_min)."""
    frame = records_to_frame(records)
    phases = frame[frame['kernel'].isin([PHASE_PREFILL, PHASE_GENERATE])].copy()
    phases['tokens_per_s'] = phases['batch'] / phases['seconds_min']
    return phases[['kernel', 'threads', 'policy', 'batch', 'seconds_min', 'tokens_per_s']] \
        .rename(columns={'kernel': 'phase', 'batch': 'tokens'}) \
        .reset_index(drop=True)


def display_speedup(records: Sequence[BenchRecord]) -> DataFrame:
    """Muestra el resumen de aceleración y avisa de los tamaños por debajo del objetivo."""
    report = speedup_report(records)
    display_table(report, "\n=== Aceleración frente al baseline ===")
    mean_speedup = report['speedup'].mean() if not report.empty else float('nan')
    print(f"\nAceleración media: {mean_speedup:.3f}x (objetivo {SPEEDUP_TARGET}x)")
    for _, row in report[report['status'].isin(['warn', 'fail'])].iterrows():
        print(f"AVISO: tamaño {row['size']} con aceleración {row['speedup']:.3f}x ({row['status']})")
    return report


def display_phases(records: Sequence[BenchRecord]) -> DataFrame:
    """Muestra los tokens por segundo de prefill y generación."""
    report = phase_report(records)
    display_table(
        report,
        "\n=== Rendimiento por fase ===",
        TableConfig(headers=['Fase', 'Hilos', 'Política', 'Tokens', 'Segundos', 'Tokens/s'])
    )
    return report
