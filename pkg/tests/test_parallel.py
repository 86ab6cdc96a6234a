"""Tests para el módulo de ejecución multihilo."""

from types import SimpleNamespace

import pytest
import numpy as np

from src import parallel
from src.kernels import ThinMatrix, bitwise_equal, gemm_thin, gemv_quantizing
from src.parallel import (
    WARN_AFFINITY,
    WARN_BALANCING_ON,
    WARN_BALANCING_UNKNOWN,
    WARN_NO_NUMA,
    WARN_NO_OS_INTERLEAVE,
    NumaPolicy,
    PlacementReport,
    RowParallelExecutor,
    ThreadPlan,
    apply_policy,
    check_plan,
    numa_balancing_status,
    numa_library,
    numa_node_count,
    parallel_gemm_thin,
    parallel_gemv,
    partition_rows,
    place_current_thread,
)
from src.quant import QuantMatrixQ4, quantize_matrix_q4

# Fixtures
@pytest.fixture
def rng() -> np.random.Generator:
    """Fixture que proporciona un generador con semilla fija."""
    return np.random.default_rng(77)

@pytest.fixture
def case_512(rng) -> tuple[QuantMatrixQ4, np.ndarray]:
    """Fixture que proporciona una matriz Q4 512×512 y un vector."""
    matrix = quantize_matrix_q4(rng.standard_normal((512, 512), dtype=np.float32))
    return matrix, rng.standard_normal(512, dtype=np.float32)

@pytest.fixture
def single_node_host(monkeypatch):
    """Fixture que simula un host sin NUMA con balanceo desactivado y 16 CPUs."""
    monkeypatch.setattr(parallel, 'numa_node_count', lambda: 1)
    monkeypatch.setattr(parallel, 'numa_balancing_status', lambda: 'off')
    monkeypatch.setattr(parallel, 'available_cpus', lambda: list(range(16)))
    monkeypatch.setattr(parallel, 'affinity_supported', lambda: True)

@pytest.fixture
def fake_numa(monkeypatch) -> SimpleNamespace:
    """Fixture que sustituye el paquete numa por un host simulado con dos nodos."""
    fake = SimpleNamespace(masks=[], available=lambda: True, get_max_node=lambda: 1)
    fake.set_interleave_mask = fake.masks.append
    monkeypatch.setattr(parallel, 'numa', fake)
    return fake

def _check_partition(m: int, t: int) -> None:
    ranges = partition_rows(m, t).ranges
    assert len(ranges) == min(m, t)
    assert ranges[0][0] == 0
    assert ranges[-1][1] == m
    assert all(prev[1] == cur[0] for prev, cur in zip(ranges, ranges[1:]))
    sizes = [end - start for start, end in ranges]
    assert min(sizes) >= 1
    assert max(sizes) - min(sizes) <= 1

# Tests para partition_rows
@pytest.mark.parametrize('m, t, expected', [
    (10, 1, ((0, 10),)),
    (10, 4, ((0, 3), (3, 6), (6, 8), (8, 10))),
    (3, 8, ((0, 1), (1, 2), (2, 3))),
])
def test_partition_rows_examples(m, t, expected):
    """Test que verifica los repartos de referencia."""
    plan = partition_rows(m, t)
    assert plan.ranges == expected
    assert plan.n_threads == t

def test_partition_rows_balanced():
    """Test que verifica que los tamaños difieren como mucho en 1."""
    for m in range(1, 60):
        for t in range(1, 10):
            sizes = [end - start for start, end in partition_rows(m, t).ranges]
            assert sum(sizes) == m
            assert max(sizes) - min(sizes) <= 1
            assert len(sizes) == min(m, t)

@pytest.mark.parametrize('m, t', [(1, 1), (1, 10_000), (10_000, 1), (10_000, 10_000), (9_999, 10_000)])
def test_partition_rows_boundaries(m, t):
    """Test que verifica los extremos del rango de filas e hilos."""
    _check_partition(m, t)

def test_partition_rows_sampled_sweep():
    """Test que verifica cobertura, disjunción y equilibrio en pares (m, t) muestreados."""
    sampler = np.random.default_rng(2024)
    for m, t in sampler.integers(1, 10_001, size=(200, 2)):
        _check_partition(int(m), int(t))

def test_partition_rows_invalid():
    """Test que verifica el rechazo de argumentos no positivos."""
    with pytest.raises(ValueError, match="no positivos"):
        partition_rows(0, 4)

def test_thread_plan_rejects_gaps():
    """Test que verifica el rechazo de tramos no contiguos."""
    with pytest.raises(ValueError, match="no contiguo"):
        ThreadPlan(n_threads=2, ranges=((0, 3), (4, 6)))

def test_check_plan_mismatch():
    """Test que verifica el rechazo de un plan para otra matriz."""
    with pytest.raises(ValueError, match="Plan incompatible"):
        check_plan(partition_rows(10, 2), 12)

# Tests para la capa NUMA
def test_numa_node_count_from_library(fake_numa):
    """Test que verifica que el número de nodos es get_max_node() + 1."""
    assert numa_node_count() == 2

def test_numa_node_count_without_library(monkeypatch):
    """Test que verifica 0 nodos si el paquete numa no está disponible."""
    monkeypatch.setattr(parallel, 'numa', None)
    assert numa_library() is None
    assert numa_node_count() == 0

def test_numa_library_kernel_without_numa(fake_numa):
    """Test que verifica que numa.available() falso desactiva la biblioteca."""
    fake_numa.available = lambda: False
    assert numa_library() is None
    assert numa_node_count() == 0

def test_apply_policy_interleave_with_library(monkeypatch, fake_numa):
    """Test que verifica el intercalado del sistema en un host con dos nodos."""
    monkeypatch.setattr(parallel, 'numa_balancing_status', lambda: 'off')
    report = apply_policy(NumaPolicy.MEMORY_INTERLEAVE, 2)
    assert report.numa_nodes == 2
    assert report.interleave == 'first-touch+os'
    assert report.warning_flags == ()

def test_place_current_thread_interleaves_all_nodes(fake_numa):
    """Test que verifica que el hilo pide intercalado sobre todos los nodos."""
    report = PlacementReport(NumaPolicy.MEMORY_INTERLEAVE, 1, numa_nodes=2, interleave='first-touch+os')
    place_current_thread(report, 0)
    assert fake_numa.masks == [{0, 1}]
    assert report.warning_flags == ()

def test_place_current_thread_library_lost(monkeypatch):
    """Test que verifica el aviso si la biblioteca desaparece antes de ubicar el hilo."""
    monkeypatch.setattr(parallel, 'numa', None)
    report = PlacementReport(NumaPolicy.MEMORY_INTERLEAVE, 1, numa_nodes=2, interleave='first-touch+os')
    place_current_thread(report, 0)
    assert WARN_NO_OS_INTERLEAVE in report.warning_flags

def test_place_current_thread_interleave_error(fake_numa):
    """Test que verifica el aviso si el sistema rechaza la máscara de intercalado."""
    def reject(nodes):
        raise OSError("máscara rechazada")

    fake_numa.set_interleave_mask = reject
    report = PlacementReport(NumaPolicy.MEMORY_INTERLEAVE, 1, numa_nodes=2, interleave='first-touch+os')
    place_current_thread(report, 0)
    assert WARN_NO_OS_INTERLEAVE in report.warning_flags

# Tests para NumaPolicy
def test_numa_policy_parse():
    """Test que verifica los nombres de política de la línea de comandos."""
    assert NumaPolicy.parse('interleave') is NumaPolicy.MEMORY_INTERLEAVE
    assert NumaPolicy.parse(' BIND ') is NumaPolicy.CORE_BINDING

def test_numa_policy_parse_unknown():
    """Test que verifica el error con una política desconocida."""
    with pytest.raises(ValueError, match="Política desconocida"):
        NumaPolicy.parse('turbo')

# Tests para apply_policy
def test_apply_policy_all_off(single_node_host):
    """Test que verifica que AllOff no fija hilos ni intercala."""
    report = apply_policy(NumaPolicy.ALL_OFF, 4)
    assert report.pinning is None
    assert report.interleave == 'none'
    assert report.warning_flags == ()

def test_apply_policy_core_binding(single_node_host):
    """Test que verifica 4 hilos en 16 CPUs fijados a 0, 1, 2, 3."""
    report = apply_policy(NumaPolicy.CORE_BINDING, 4)
    assert report.pinning == [0, 1, 2, 3]

def test_apply_policy_core_binding_wraps(monkeypatch, single_node_host):
    """Test que verifica el reparto circular con más hilos que CPUs."""
    monkeypatch.setattr(parallel, 'available_cpus', lambda: [2, 5])
    report = apply_policy(NumaPolicy.CORE_BINDING, 3)
    assert report.pinning == [2, 5, 2]

def test_apply_policy_core_binding_unsupported(monkeypatch, single_node_host):
    """Test que verifica el aviso si el host no permite fijar hilos."""
    monkeypatch.setattr(parallel, 'affinity_supported', lambda: False)
    report = apply_policy(NumaPolicy.CORE_BINDING, 2)
    assert report.pinning is None
    assert WARN_AFFINITY in report.warning_flags

def test_apply_policy_interleave_non_numa(single_node_host):
    """Test que verifica el aviso de intercalado en un host sin NUMA."""
    report = apply_policy(NumaPolicy.MEMORY_INTERLEAVE, 2)
    assert report.interleave == 'first-touch'
    assert WARN_NO_NUMA in report.warning_flags

def test_apply_policy_balancing_on_host(monkeypatch, single_node_host):
    """Test que verifica el aviso si el host tiene el balanceo activo."""
    monkeypatch.setattr(parallel, 'numa_balancing_status', lambda: 'on')
    report = apply_policy(NumaPolicy.ALL_OFF, 2)
    assert WARN_BALANCING_ON in report.warning_flags
    assert apply_policy(NumaPolicy.BALANCING_ON, 2).warning_flags == ()

def test_apply_policy_balancing_unknown(monkeypatch, single_node_host):
    """Test que verifica el aviso si no se puede leer el balanceo del host."""
    monkeypatch.setattr(parallel, 'numa_balancing_status', lambda: 'unknown')
    assert WARN_BALANCING_UNKNOWN in apply_policy(NumaPolicy.BALANCING_ON, 1).warning_flags

def test_numa_balancing_status_reads_file(monkeypatch, tmp_path):
    """Test que verifica la lectura del fichero de balanceo del kernel."""
    path = tmp_path / 'numa_balancing'
    path.write_text('0\n')
    monkeypatch.setattr(parallel, 'NUMA_BALANCING_PATH', path)
    assert numa_balancing_status() == 'off'
    path.write_text('1\n')
    assert numa_balancing_status() == 'on'
    monkeypatch.setattr(parallel, 'NUMA_BALANCING_PATH', tmp_path / 'missing')
    assert numa_balancing_status() == 'unknown'

def test_placement_report_summary():
    """Test que verifica la línea de resumen y la eliminación de avisos repetidos."""
    report = PlacementReport(NumaPolicy.CORE_BINDING, 2, pinning=[0, 1], warnings=['a', 'a', 'b'])
    assert report.warning_flags == ('a', 'b')
    summary = report.summary()
    assert "bind" in summary
    assert "fijación=0,1" in summary
    assert "avisos=a;b" in summary

# Tests para parallel_gemv
def test_parallel_gemv_single_thread_defers(case_512):
    """Test que verifica que un solo tramo usa el kernel serie."""
    matrix, x = case_512
    out = parallel_gemv(matrix, x, partition_rows(512, 1))
    assert bitwise_equal(out, gemv_quantizing(matrix, x))

def test_parallel_gemv_eight_threads(case_512):
    """Test que verifica 8 hilos frente a 1 sobre 512×512."""
    matrix, x = case_512
    out = parallel_gemv(matrix, x, partition_rows(512, 8))
    assert bitwise_equal(out, gemv_quantizing(matrix, x))

@pytest.mark.parametrize('policy', list(NumaPolicy))
def test_parallel_gemv_policies_bitwise(case_512, policy):
    """Test que verifica que la política nunca cambia la aritmética."""
    matrix, x = case_512
    with RowParallelExecutor(4, policy, debug=True) as pool:
        out = parallel_gemv(matrix, x, partition_rows(512, 4), policy, executor=pool)
    assert bitwise_equal(out, gemv_quantizing(matrix, x))

def test_parallel_gemv_more_threads_than_rows(rng):
    """Test que verifica el caso t > m."""
    matrix = quantize_matrix_q4(rng.standard_normal((3, 64), dtype=np.float32))
    x = rng.standard_normal(64, dtype=np.float32)
    out = parallel_gemv(matrix, x, partition_rows(3, 8))
    assert bitwise_equal(out, gemv_quantizing(matrix, x))

def test_parallel_gemv_plan_mismatch(case_512):
    """Test que verifica el rechazo de un plan de otra forma."""
    matrix, x = case_512
    with pytest.raises(ValueError, match="Plan incompatible"):
        parallel_gemv(matrix, x, partition_rows(100, 2))

def test_parallel_gemv_policy_mismatch(case_512):
    """Test que verifica el rechazo de una política distinta de la del pool."""
    matrix, x = case_512
    with RowParallelExecutor(2) as pool:
        with pytest.raises(ValueError, match="incompatible con el pool"):
            parallel_gemv(matrix, x, partition_rows(512, 2), NumaPolicy.BALANCING_ON, executor=pool)
        out = parallel_gemv(matrix, x, partition_rows(512, 2), executor=pool)
    assert bitwise_equal(out, gemv_quantizing(matrix, x))

# Tests para parallel_gemm_thin
@pytest.mark.parametrize('batch', [1, 2, 8, 32])
def test_parallel_gemm_thin_bitwise(rng, case_512, batch):
    """Test que verifica la GEMM fina multihilo frente a la serie."""
    matrix, _ = case_512
    thin = ThinMatrix.from_columns(rng.standard_normal((batch, 512), dtype=np.float32))
    out = parallel_gemm_thin(matrix, thin, partition_rows(512, 4), NumaPolicy.MEMORY_INTERLEAVE)
    assert bitwise_equal(out, gemm_thin(matrix, thin))

def test_parallel_gemm_thin_policy_mismatch(rng, case_512):
    """Test que verifica el rechazo de una política distinta de la del pool en la GEMM fina."""
    matrix, _ = case_512
    thin = ThinMatrix.from_columns(rng.standard_normal((2, 512), dtype=np.float32))
    with RowParallelExecutor(2) as pool:
        with pytest.raises(ValueError, match="incompatible con el pool"):
            parallel_gemm_thin(matrix, thin, partition_rows(512, 2),
                               NumaPolicy.MEMORY_INTERLEAVE, executor=pool)

# Tests para RowParallelExecutor
def test_executor_reuses_interleaved_shards(case_512):
    """Test que verifica que las copias por hilo se reutilizan entre llamadas."""
    matrix, x = case_512
    with RowParallelExecutor(2, NumaPolicy.MEMORY_INTERLEAVE) as pool:
        first = pool.gemv(matrix, x)
        shards = [dict(s) for s in pool._shards]
        second = pool.gemv(matrix, x)
        assert all(len(s) == 1 for s in pool._shards)
        assert [list(s.values())[0][1] for s in shards] == [list(s.values())[0][1] for s in pool._shards]
    assert bitwise_equal(first, second)

def test_executor_rejects_large_plan(case_512):
    """Test que verifica que el plan no puede usar más tramos que hilos."""
    matrix, x = case_512
    with RowParallelExecutor(2) as pool:
        with pytest.raises(ValueError, match="tramos"):
            pool.gemv(matrix, x, partition_rows(512, 4))

def test_executor_propagates_worker_errors():
    """Test que verifica que un error dentro de un hilo llega al llamador."""
    def job(worker: int, start: int, end: int) -> None:
        if worker == 1:
            raise ValueError(f"fallo en el tramo {start}-{end}")

    with RowParallelExecutor(2) as pool:
        with pytest.raises(ValueError, match="fallo en el tramo 2-4"):
            pool._run(partition_rows(4, 2), job)
        pool._run(partition_rows(4, 2), lambda worker, start, end: None)

def test_executor_closed():
    """Test que verifica el error al usar un pool cerrado."""
    pool = RowParallelExecutor(2)
    pool.close()
    matrix = quantize_matrix_q4(np.ones((4, 32)))
    with pytest.raises(RuntimeError, match="cerrado"):
        pool.gemv(matrix, np.ones(32))

def test_executor_invalid_threads():
    """Test que verifica el rechazo de un número de hilos no positivo."""
    with pytest.raises(ValueError, match="no positivo"):
        RowParallelExecutor(0)

if __name__ == '__main__':
    pytest.main(['-v', __file__])
