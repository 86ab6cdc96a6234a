"""
Módulo de ejecución multihilo determinista de los kernels.

Reparte las filas de la matriz de pesos en tramos contiguos, uno por hilo,
y expone como configuración las cuatro políticas de ubicación NUMA:
balanceo automático, todo desactivado, fijación a núcleos e intercalado de
memoria.
"""

import os
import queue
import threading
import weakref
from dataclasses import dataclass, field
from enum import StrEnum
from pathlib import Path
from types import ModuleType
from typing import Callable, Final, Optional
import numpy as np
from src.kernels import ThinMatrix, gemm_thin, gemv_q4_q8, gemv_quantizing
from src.quant import QuantMatrixQ4, quantize_vec_q8

try:
    import numa
except (ImportError, OSError):
    numa = None

# Rutas de consulta del host
NUMA_BALANCING_PATH: Final[Path] = Path('/proc/sys/kernel/numa_balancing')

# Indicadores de aviso del informe de ubicación
WARN_AFFINITY: Final[str] = 'affinity_unsupported'
WARN_NO_NUMA: Final[str] = 'numa_unavailable'
WARN_NO_OS_INTERLEAVE: Final[str] = 'os_interleave_unavailable'
WARN_BALANCING_OFF: Final[str] = 'numa_balancing_host_off'
WARN_BALANCING_ON: Final[str] = 'numa_balancing_host_on'
WARN_BALANCING_UNKNOWN: Final[str] = 'numa_balancing_unknown'
WARN_PIN_FAILED: Final[str] = 'pinning_failed'


class NumaPolicy(StrEnum):
    """Las cuatro políticas de ubicación de hilos y memoria."""
    BALANCING_ON = 'balancing'
    ALL_OFF = 'alloff'
    CORE_BINDING = 'bind'
    MEMORY_INTERLEAVE = 'interleave'

    @classmethod
    def parse(cls, name: str) -> 'NumaPolicy':
        """
        Convierte un nombre de la línea de comandos en una política.

        Raises:
            ValueError: Si el nombre no corresponde a ninguna política
        """
        try:
            return cls(name.strip().lower())
        except ValueError as e:
            valid = ', '.join(p.value for p in cls)
            raise ValueError(f"Política desconocida '{name}'. Opciones: {valid}") from e


@dataclass(frozen=True)
class ThreadPlan:
    """
    Reparto de filas entre hilos.

    Attributes:
        n_threads: Número de hilos solicitados
        ranges: Intervalos semiabiertos (inicio, fin), ordenados y contiguos
    """
    n_threads: int
    ranges: tuple[tuple[int, int], ...]

    def __post_init__(self) -> None:
        if self.n_threads < 1 or not self.ranges:
            raise ValueError("Un plan necesita al menos un hilo y un tramo")
        expected_start = 0
        for start, end in self.ranges:
            if start != expected_start or end <= start:
                raise ValueError(f"Tramo ({start}, {end}) no contiguo o vacío")
            expected_start = end
        sizes = [end - start for start, end in self.ranges]
        if max(sizes) - min(sizes) > 1:
            raise ValueError("Los tramos deben diferir como mucho en una fila")
        if len(self.ranges) != min(self.n_threads, self.rows):
            raise ValueError("El número de tramos debe ser min(hilos, filas)")

    @property
    def rows(self) -> int:
        """Número total de filas cubiertas."""
        return self.ranges[-1][1]


def partition_rows(m: int, t: int) -> ThreadPlan:
    """
    Reparte m filas en tramos contiguos y equilibrados para t hilos.

    Los primeros m mod t tramos tienen ⌈m/t⌉ filas y el resto ⌊m/t⌋; si
    t > m, se devuelven m tramos de una fila.

    Raises:
        ValueError: Si m o t no son positivos

    Examples:
        >>> partition_rows(10, 4).ranges
        ((0, 3), (3, 6), (6, 8), (8, 10))
    """
    if m < 1 or t < 1:
        raise ValueError(f"Argumentos no positivos: m={m}, t={t}")
    chunks = min(m, t)
    base, extra = divmod(m, chunks)
    ranges = []
    start = 0
    for k in range(chunks):
        end = start + base + (1 if k < extra else 0)
        ranges.append((start, end))
        start = end
    return ThreadPlan(n_threads=t, ranges=tuple(ranges))


@dataclass
class PlacementReport:
    """
    Informe de lo aplicado por una política de ubicación.

    Attributes:
        policy: Política solicitada
        n_threads: Número de hilos
        pinning: CPU lógica de cada hilo, o None si no se fijan
        interleave: 'none', 'first-touch' o 'first-touch+os'
        numa_nodes: Nodos NUMA visibles en el host (0 si no se sabe)
        numa_balancing: Estado del balanceo automático del host ('on', 'off', 'unknown')
        warnings: Indicadores de degradación
    """
    policy: NumaPolicy
    n_threads: int
    pinning: Optional[list[int]] = None
    interleave: str = 'none'
    numa_nodes: int = 0
    numa_balancing: str = 'unknown'
    warnings: list[str] = field(default_factory=list)

    @property
    def warning_flags(self) -> tuple[str, ...]:
        """Avisos sin duplicados, en orden de aparición."""
        return tuple(dict.fromkeys(self.warnings))

    def summary(self) -> str:
        """Genera una línea legible con el resultado de la ubicación."""
        pinning = ','.join(str(c) for c in self.pinning) if self.pinning else 'none'
        warnings = ';'.join(self.warning_flags) or '-'
        return (
            f"Política {self.policy.value}: hilos={self.n_threads} "
            f"fijación={pinning} intercalado={self.interleave} "
            f"nodos={self.numa_nodes} balanceo={self.numa_balancing} avisos={warnings}"
        )


def available_cpus() -> list[int]:
    """CPUs lógicas en las que puede ejecutarse el proceso."""
    if hasattr(os, 'sched_getaffinity'):
        return sorted(os.sched_getaffinity(0))
    return list(range(os.cpu_count() or 1))


def affinity_supported() -> bool:
    """Indica si el host permite fijar hilos a CPUs."""
    return hasattr(os, 'sched_setaffinity')


def numa_library() -> Optional[ModuleType]:
    """Devuelve el módulo ``numa`` si está instalado y el kernel soporta NUMA."""
    if numa is None:
        return None
    try:
        return numa if numa.available() else None
    except (OSError, AttributeError):
        return None


def numa_node_count() -> int:
    """Cuenta los nodos NUMA del host; 0 si no hay información."""
    lib = numa_library()
    if lib is None:
        return 0
    try:
        return lib.get_max_node() + 1
    except (OSError, AttributeError):
        return 0


def numa_balancing_status() -> str:
    """Lee el estado del balanceo NUMA automático del kernel."""
    try:
        value = NUMA_BALANCING_PATH.read_text(encoding='utf-8').strip()
    except OSError:
        return 'unknown'
    return 'off' if value == '0' else 'on'


def apply_policy(policy: NumaPolicy, n_threads: int) -> PlacementReport:
    """
    Resuelve qué ubicación se aplicará a cada hilo con una política.

    CoreBinding fija el hilo k a la CPU lógica k mod CPUs disponibles.
    MemoryInterleave reparte los pesos por primer contacto (cada hilo copia
    su propio tramo de filas) y pide intercalado al sistema si lo expone.
    BalancingOn y AllOff no cambian nada dentro del proceso y solo registran
    el estado del balanceo del host. Nunca falla: la degradación se informa
    con avisos.

    Args:
        policy: Política a aplicar
        n_threads: Número de hilos de trabajo

    Returns:
        PlacementReport con lo resuelto
    """
    report = PlacementReport(
        policy=policy,
        n_threads=n_threads,
        numa_nodes=numa_node_count(),
        numa_balancing=numa_balancing_status()
    )

    if policy is NumaPolicy.BALANCING_ON:
        if report.numa_balancing == 'off':
            report.warnings.append(WARN_BALANCING_OFF)
    elif report.numa_balancing == 'on':
        # Las otras tres políticas suponen el balanceo desactivado
        report.warnings.append(WARN_BALANCING_ON)
    if report.numa_balancing == 'unknown':
        report.warnings.append(WARN_BALANCING_UNKNOWN)

    if policy is NumaPolicy.CORE_BINDING:
        cpus = available_cpus()
        if affinity_supported() and cpus:
            report.pinning = [cpus[k % len(cpus)] for k in range(n_threads)]
        else:
            report.warnings.append(WARN_AFFINITY)

    if policy is NumaPolicy.MEMORY_INTERLEAVE:
        report.interleave = 'first-touch'
        if report.numa_nodes <= 1:
            report.warnings.append(WARN_NO_NUMA)
        elif numa_library() is not None:
            report.interleave = 'first-touch+os'
        else:
            report.warnings.append(WARN_NO_OS_INTERLEAVE)

    return report


def place_current_thread(report: PlacementReport, worker: int) -> None:
    """Aplica al hilo actual la ubicación del informe para el hilo ``worker``."""
    if report.pinning is not None:
        try:
            os.sched_setaffinity(0, {report.pinning[worker]})
        except OSError:
            report.warnings.append(WARN_PIN_FAILED)

    if report.interleave == 'first-touch+os':
        lib = numa_library()
        if lib is None:
            report.warnings.append(WARN_NO_OS_INTERLEAVE)
            return
        try:
            lib.set_interleave_mask(set(range(report.numa_nodes)))
        except (OSError, ValueError, AttributeError):
            report.warnings.append(WARN_NO_OS_INTERLEAVE)


class RowParallelExecutor:
    """
    Pool de hilos de larga duración con reparto fijo de filas.

    El hilo k procesa siempre el tramo k del plan y escribe solo su porción
    de la salida; una barrera cierra cada llamada. Con MemoryInterleave cada
    hilo guarda una copia propia de su tramo de pesos (primer contacto).

    Attributes:
        n_threads: Número de hilos de trabajo
        policy: Política de ubicación
        report: Informe de ubicación aplicado
        debug: Si es True, comprueba que cada salida se escribe una sola vez
    """

    def __init__(self, n_threads: int, policy: NumaPolicy = NumaPolicy.ALL_OFF,
                 debug: bool = False) -> None:
        if n_threads < 1:
            raise ValueError(f"Número de hilos no positivo: {n_threads}")
        self.n_threads = n_threads
        self.policy = policy
        self.debug = debug
        self.report = apply_policy(policy, n_threads)

        self._queues: list[queue.SimpleQueue] = [queue.SimpleQueue() for _ in range(n_threads)]
        self._shards: list[dict] = [{} for _ in range(n_threads)]
        ready = threading.Barrier(n_threads + 1)
        self._threads = [
            threading.Thread(
                target=self._worker_loop,
                args=(k, ready),
                name=f'qbench-worker-{k}',
                daemon=True
            )
            for k in range(n_threads)
        ]
        for thread in self._threads:
            thread.start()
        ready.wait()
        self._closed = False

    def __enter__(self) -> 'RowParallelExecutor':
        return self

    def __exit__(self, *exc_info) -> None:
        self.close()

    def close(self) -> None:
        """Detiene y espera a todos los hilos."""
        if self._closed:
            return
        for q in self._queues:
            q.put(None)
        for thread in self._threads:
            thread.join()
        self._closed = True

    def _worker_loop(self, worker: int, ready: threading.Barrier) -> None:
        place_current_thread(self.report, worker)
        ready.wait()
        while True:
            task = self._queues[worker].get()
            if task is None:
                return
            task()

    def _run(self, plan: ThreadPlan, job: Callable[[int, int, int], None]) -> None:
        if self._closed:
            raise RuntimeError("El pool de hilos ya está cerrado")
        barrier = threading.Barrier(len(plan.ranges) + 1)
        errors: list[Exception] = []

        def make_task(worker: int, start: int, end: int) -> Callable[[], None]:
            def task() -> None:
                try:
                    job(worker, start, end)
                except Exception as e:  # pylint: disable=broad-except
                    errors.append(e)
                finally:
                    barrier.wait()
            return task

        for worker, (start, end) in enumerate(plan.ranges):
            self._queues[worker].put(make_task(worker, start, end))
        barrier.wait()
        if errors:
            raise errors[0]

    def _plan_for(self, rows: int, plan: Optional[ThreadPlan]) -> ThreadPlan:
        plan = plan or partition_rows(rows, self.n_threads)
        check_plan(plan, rows)
        if len(plan.ranges) > self.n_threads:
            raise ValueError(
                f"El plan usa {len(plan.ranges)} tramos y el pool tiene {self.n_threads} hilos"
            )
        return plan

    def _weights_for(self, worker: int, matrix: QuantMatrixQ4,
                     start: int, end: int) -> QuantMatrixQ4:
        if self.policy is not NumaPolicy.MEMORY_INTERLEAVE:
            return matrix.row_slice(start, end)

        shards = self._shards[worker]
        key = (id(matrix), start, end)
        cached = shards.get(key)
        if cached is not None and cached[0]() is matrix:
            return cached[1]
        for stale in [k for k, (ref, _) in shards.items() if ref() is None]:
            del shards[stale]
        # La copia la hace este hilo: las páginas quedan en su nodo
        shard = matrix.row_slice(start, end, copy=True)
        shards[key] = (weakref.ref(matrix), shard)
        return shard

    def _write_counter(self, shape: tuple[int, ...]) -> Optional[np.ndarray]:
        return np.zeros(shape[0], dtype=np.int64) if self.debug else None

    @staticmethod
    def _check_writes(writes: Optional[np.ndarray]) -> None:
        if writes is not None and not np.all(writes == 1):
            raise RuntimeError("Condición de carrera: alguna fila no se escribió exactamente una vez")

    def gemv(self, matrix: QuantMatrixQ4, x: np.ndarray,
             plan: Optional[ThreadPlan] = None) -> np.ndarray:
        """
        GEMV cuantizante repartida por filas.

        Args:
            matrix: Pesos Q4 m×n
            x: Vector fp32 de n elementos
            plan: Reparto de filas; por defecto partition_rows(m, n_threads)

        Returns:
            Vector float32 bit a bit igual a gemv_quantizing(matrix, x)

        Raises:
            ValueError: Si el plan o las dimensiones no son compatibles
        """
        plan = self._plan_for(matrix.rows, plan)
        vector = np.asarray(x, dtype=np.float32)
        if vector.size != matrix.cols:
            raise ValueError(
                f"Dimensiones incompatibles: {matrix.cols} columnas y {vector.size} elementos"
            )
        quantized = quantize_vec_q8(vector)
        out = np.empty(matrix.rows, dtype=np.float32)
        writes = self._write_counter(out.shape)

        def job(worker: int, start: int, end: int) -> None:
            out[start:end] = gemv_q4_q8(self._weights_for(worker, matrix, start, end), quantized)
            if writes is not None:
                writes[start:end] += 1

        self._run(plan, job)
        self._check_writes(writes)
        return out

    def gemm_thin(self, matrix: QuantMatrixQ4, x: ThinMatrix,
                  plan: Optional[ThreadPlan] = None) -> np.ndarray:
        """GEMM fina repartida por filas; bit a bit igual a gemm_thin(matrix, x)."""
        plan = self._plan_for(matrix.rows, plan)
        if x.rows != matrix.cols:
            raise ValueError(
                f"Dimensiones incompatibles: {matrix.cols} columnas y columnas de {x.rows}"
            )
        out = np.empty((matrix.rows, x.cols), dtype=np.float32)
        writes = self._write_counter(out.shape)

        def job(worker: int, start: int, end: int) -> None:
            out[start:end] = gemm_thin(self._weights_for(worker, matrix, start, end), x)
            if writes is not None:
                writes[start:end] += 1

        self._run(plan, job)
        self._check_writes(writes)
        return out


def check_plan(plan: ThreadPlan, rows: int) -> None:
    """
    Comprueba que el plan cubra exactamente las filas de la matriz.

    Raises:
        ValueError: Si el plan no corresponde a ``rows`` filas
    """
    if plan.rows != rows:
        raise ValueError(f"Plan incompatible: cubre {plan.rows} filas y la matriz tiene {rows}")


def _resolve_policy(policy: Optional[NumaPolicy],
                    executor: Optional[RowParallelExecutor]) -> NumaPolicy:
    if executor is None:
        return policy or NumaPolicy.ALL_OFF
    if policy is not None and policy != executor.policy:
        raise ValueError(
            f"Política '{policy}' incompatible con el pool, que usa '{executor.policy}'"
        )
    return executor.policy


def parallel_gemv(matrix: QuantMatrixQ4, x: np.ndarray, plan: ThreadPlan,
                  policy: Optional[NumaPolicy] = None,
                  executor: Optional[RowParallelExecutor] = None) -> np.ndarray:
    """
    GEMV cuantizante multihilo, bit a bit igual a la versión serie.

    Con un solo tramo delega en el kernel serie. Si no se pasa un pool, se
    crea uno temporal con la política indicada (AllOff por defecto); con un
    pool, la política es la suya.

    Raises:
        ValueError: Si el plan no corresponde a la matriz o la política no
            coincide con la del pool
    """
    policy = _resolve_policy(policy, executor)
    check_plan(plan, matrix.rows)
    if len(plan.ranges) == 1:
        return gemv_quantizing(matrix, x)
    if executor is not None:
        return executor.gemv(matrix, x, plan)
    with RowParallelExecutor(plan.n_threads, policy) as pool:
        return pool.gemv(matrix, x, plan)


def parallel_gemm_thin(matrix: QuantMatrixQ4, x: ThinMatrix, plan: ThreadPlan,
                       policy: Optional[NumaPolicy] = None,
                       executor: Optional[RowParallelExecutor] = None) -> np.ndarray:
    """GEMM fina multihilo, bit a bit igual a gemm_thin; misma regla de política que parallel_gemv."""
    policy = _resolve_policy(policy, executor)
    check_plan(plan, matrix.rows)
    if len(plan.ranges) == 1:
        return gemm_thin(matrix, x)
    if executor is not None:
        return executor.gemm_thin(matrix, x, plan)
    with RowParallelExecutor(plan.n_threads, policy) as pool:
        return pool.gemm_thin(matrix, x, plan)
