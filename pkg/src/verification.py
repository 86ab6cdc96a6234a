"""
Módulo de verificación: ejecuta la batería de propiedades de qbench
(cotas de cuantización, oráculos, determinismo, equivalencia de regímenes,
ficheros dorados y criterios de rendimiento) y resume el resultado.
"""

import tempfile
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Final, Optional
import numpy as np
from src.bench import (
    CSV_HEADER,
    SPEEDUP_MIN_SIZE,
    BenchRecord,
    SweepConfig,
    emit_csv,
    parse_csv,
    speedup_report,
    sweep_sizes,
)
from src.kernels import (
    DenseMatrix,
    ThinMatrix,
    bitwise_equal,
    dot_block_q4_q8,
    gemm_thin,
    gemv_f32_reference,
    gemv_f64_oracle,
    gemv_quantizing,
)
from src.parallel import NumaPolicy, RowParallelExecutor, parallel_gemm_thin, parallel_gemv, partition_rows
from src.quant import (
    BLOCK_SIZE,
    dequantize_matrix_q4,
    dequantize_vec_q8,
    encode_qmat,
    quantize_block_q4,
    quantize_matrix_q4,
    quantize_vec_q8,
    read_qmat,
)
from src.toymodel import build_toy_decoder, generate, get_preset, prefill
from src.utils import TableConfig, display_table, make_rng

# Códigos de salida
EXIT_OK: Final[int] = 0
EXIT_VERIFY_FAILED: Final[int] = 1

GOLDEN_QMAT: Final[Path] = Path(__file__).parent / 'data' / 'golden_q4.qmat'
GOLDEN_SCALES: Final[tuple[tuple[float, ...], ...]] = ((1.0, 0.0), (-0.5, 0.25))
GOLDEN_CODES: Final[tuple[tuple[tuple[int, ...], ...], ...]] = (
    (tuple(i % 16 for i in range(BLOCK_SIZE)), (8,) * BLOCK_SIZE),
    ((0,) * BLOCK_SIZE, (15,) * BLOCK_SIZE),
)

# Tolerancias
ORACLE_TOLERANCE: Final[float] = 1e-4
ROUNDING_SLACK: Final[float] = 1e-6
# Error RMS relativo frente a fp32 denso con A ~ N(0, 1): ~0.09 estimado, ×1.5
RMS_ERROR_BOUND: Final[float] = 0.13
CSV_GOLDEN_ROW: Final[str] = 'gemv_quantizing,1024,1024,1,1,alloff,10,0.00125,0.001,2.097152,'

# Semillas de cada comprobación
PROPERTY_STREAMS: Final[dict[str, int]] = {
    'quant': 1, 'oracle': 2, 'paths': 3, 'parallel': 4, 'gemm': 5, 'rms': 6,
}


@dataclass
class VerifyConfig:
    """
    Tamaños de la batería de verificación.

    Los valores por defecto son los de aceptación; los tests usan versiones
    reducidas.
    """
    seed: int = 42
    quant_blocks: int = 100_000
    oracle_instances: int = 200
    oracle_max_rows: int = 64
    oracle_max_cols: int = 8192
    rms_rows: int = 128
    path_instances: int = 20
    parallel_instances: int = 50
    parallel_threads: tuple[int, ...] = (1, 2, 4, 8)
    parallel_max_rows: int = 300
    gemm_batches: tuple[int, ...] = (1, 2, 8, 32)
    regime_prompts: tuple[int, ...] = (1, 4, 22)
    speedup_sizes: tuple[int, ...] = (1024, 2048)
    speedup_reps: int = 5
    speedup_warmup: int = 2
    phase_prompt: int = 22
    phase_tokens: int = 64
    phase_threads: int = 4
    phase_reps: int = 3
    phase_required: int = 2
    golden_path: Path = GOLDEN_QMAT
    skip_performance: bool = False


def _require(condition: bool, message: str) -> None:
    if not condition:
        raise AssertionError(message)


def check_quant_bounds(cfg: VerifyConfig) -> Optional[str]:
    """
    Cotas de ida y vuelta de Q4 y Q8 sobre bloques aleatorios.

    Q4: |x - x'| <= |d|/2, salvo los elementos que se saturan al código 15
    (x/d >= 7.5), acotados por |d|. Q8: |x - x'| <= |d|/2.
    """
    rng = make_rng(cfg.seed, PROPERTY_STREAMS['quant'])
    magnitudes = 10.0 ** rng.uniform(-3, 3, size=(cfg.quant_blocks, 1))
    values = (rng.standard_normal((cfg.quant_blocks, BLOCK_SIZE)) * magnitudes).astype(np.float32)

    matrix = quantize_matrix_q4(values)
    restored = dequantize_matrix_q4(matrix)
    scales = matrix.scales[:, :1]
    d = np.abs(scales)
    safe = np.where(scales == 0, np.float32(1), scales)
    saturated = values / safe >= 7.5
    slack = ROUNDING_SLACK * np.max(np.abs(values), axis=1, keepdims=True)
    bound = np.where(saturated, d, d / 2) + slack
    q4_violations = int(np.count_nonzero(np.abs(values - restored) > bound))

    flat = values.reshape(-1)
    vector = quantize_vec_q8(flat)
    restored_q8 = dequantize_vec_q8(vector).reshape(cfg.quant_blocks, BLOCK_SIZE)
    d8 = np.abs(vector.scales)[:, None]
    q8_violations = int(np.count_nonzero(np.abs(values - restored_q8) > d8 / 2 + slack))

    print(f"Bloques Q4: {cfg.quant_blocks}, violaciones: {q4_violations}")
    print(f"Bloques Q8: {cfg.quant_blocks}, violaciones: {q8_violations}")
    _require(q4_violations == 0, f"{q4_violations} elementos Q4 fuera de cota")
    _require(q8_violations == 0, f"{q8_violations} elementos Q8 fuera de cota")
    return None


def check_kernel_oracle(cfg: VerifyConfig) -> Optional[str]:
    """Kernel frente al oráculo fp64 y error RMS frente a fp32 denso."""
    rng = make_rng(cfg.seed, PROPERTY_STREAMS['oracle'])
    violations = 0
    for _ in range(cfg.oracle_instances):
        m = int(rng.integers(1, cfg.oracle_max_rows + 1))
        n = BLOCK_SIZE * int(rng.integers(1, cfg.oracle_max_cols // BLOCK_SIZE + 1))
        matrix = quantize_matrix_q4(rng.uniform(-1, 1, (m, n)).astype(np.float32))
        x = rng.uniform(-1, 1, n).astype(np.float32)
        out = gemv_quantizing(matrix, x).astype(np.float64)
        oracle = gemv_f64_oracle(matrix, x)
        violations += int(np.count_nonzero(np.abs(out - oracle) > ORACLE_TOLERANCE * (1 + np.abs(oracle))))
    print(f"Instancias: {cfg.oracle_instances}, violaciones: {violations}")
    _require(violations == 0, f"{violations} elementos fuera de la tolerancia del oráculo")

    rms_rng = make_rng(cfg.seed, PROPERTY_STREAMS['rms'])
    dense = rms_rng.standard_normal((cfg.rms_rows, 4096), dtype=np.float32)
    x = rms_rng.standard_normal(4096, dtype=np.float32)
    reference = gemv_f32_reference(DenseMatrix.from_array(dense), x).astype(np.float64)
    out = gemv_quantizing(quantize_matrix_q4(dense), x).astype(np.float64)
    rms = float(np.sqrt(np.mean((out - reference) ** 2) / np.mean(reference ** 2)))
    print(f"Error RMS relativo frente a fp32 denso: {rms:.4f} (cota {RMS_ERROR_BOUND})")
    _require(rms <= RMS_ERROR_BOUND, f"Error RMS relativo {rms:.4f} por encima de {RMS_ERROR_BOUND}")
    return None


def check_path_equivalence(cfg: VerifyConfig) -> Optional[str]:
    """Caminos escalar y vectorial bit a bit idénticos."""
    rng = make_rng(cfg.seed, PROPERTY_STREAMS['paths'])
    for _ in range(cfg.path_instances):
        m = int(rng.integers(1, 9))
        n = BLOCK_SIZE * int(rng.integers(1, 9))
        matrix = quantize_matrix_q4(rng.standard_normal((m, n), dtype=np.float32))
        x = rng.standard_normal(n, dtype=np.float32)
        _require(
            bitwise_equal(gemv_quantizing(matrix, x, 'scalar'), gemv_quantizing(matrix, x, 'vector')),
            f"Caminos distintos en GEMV {m}×{n}"
        )
        block_a = quantize_block_q4(rng.standard_normal(BLOCK_SIZE))
        block_b = quantize_vec_q8(rng.standard_normal(BLOCK_SIZE)).block(0)
        _require(
            dot_block_q4_q8(block_a, block_b, 'scalar') == dot_block_q4_q8(block_a, block_b, 'vector'),
            "Caminos distintos en el producto de bloques"
        )
    print(f"Instancias comparadas: {cfg.path_instances}")
    return None


def check_parallel_determinism(cfg: VerifyConfig) -> Optional[str]:
    """GEMV multihilo bit a bit igual a la serie con todas las políticas."""
    rng = make_rng(cfg.seed, PROPERTY_STREAMS['parallel'])
    instances = []
    for _ in range(cfg.parallel_instances):
        m = int(rng.integers(1, cfg.parallel_max_rows + 1))
        n = BLOCK_SIZE * int(rng.integers(1, 33))
        matrix = quantize_matrix_q4(rng.standard_normal((m, n), dtype=np.float32))
        x = rng.standard_normal(n, dtype=np.float32)
        instances.append((matrix, x, gemv_quantizing(matrix, x)))

    flags: set[str] = set()
    for threads in cfg.parallel_threads:
        for policy in NumaPolicy:
            with RowParallelExecutor(threads, policy, debug=True) as pool:
                flags.update(pool.report.warning_flags)
                for matrix, x, serial in instances:
                    plan = partition_rows(matrix.rows, threads)
                    out = parallel_gemv(matrix, x, plan, policy, executor=pool)
                    _require(
                        bitwise_equal(out, serial),
                        f"Salida distinta con t={threads}, política {policy.value}, m={matrix.rows}"
                    )
    print(f"Instancias: {cfg.parallel_instances} × hilos {list(cfg.parallel_threads)} × 4 políticas")
    if flags:
        return f"avisos de ubicación: {', '.join(sorted(flags))}"
    return None


def check_gemm_consistency(cfg: VerifyConfig) -> Optional[str]:
    """GEMM fina (serie y multihilo) igual columna a columna a la GEMV."""
    rng = make_rng(cfg.seed, PROPERTY_STREAMS['gemm'])
    m, n = 96, 256
    matrix = quantize_matrix_q4(rng.standard_normal((m, n), dtype=np.float32))
    with RowParallelExecutor(4, debug=True) as pool:
        for batch in cfg.gemm_batches:
            thin = ThinMatrix.from_columns(rng.standard_normal((batch, n), dtype=np.float32))
            serial = gemm_thin(matrix, thin)
            parallel = parallel_gemm_thin(matrix, thin, partition_rows(m, 4), executor=pool)
            _require(bitwise_equal(serial, parallel), f"GEMM multihilo distinta con b={batch}")
            for j in range(batch):
                _require(
                    bitwise_equal(serial[:, j], gemv_quantizing(matrix, thin.column(j))),
                    f"Columna {j} distinta de la GEMV con b={batch}"
                )
    print(f"Anchos comprobados: {list(cfg.gemm_batches)}")
    return None


def check_regime_equivalence(cfg: VerifyConfig) -> Optional[str]:
    """prefill(p) coincide bit a bit con p pasos secuenciales."""
    model = build_toy_decoder(get_preset('toy'), cfg.seed, name='toy')
    for prompt in cfg.regime_prompts:
        hidden, _ = prefill(model, prompt)
        batched = hidden[-1].copy()
        prefill(model, 1)
        generate(model, prompt - 1)
        _require(
            bitwise_equal(batched, model.last_hidden),
            f"Estado final distinto entre prefill y generación con p={prompt}"
        )
    print(f"Longitudes de prompt comprobadas: {list(cfg.regime_prompts)}")
    return None


def check_golden_qmat(cfg: VerifyConfig) -> Optional[str]:
    """El fichero .qmat dorado se lee con los valores esperados y se reescribe byte a byte."""
    matrix = read_qmat(cfg.golden_path)
    _require((matrix.rows, matrix.cols) == (2, 64), "Forma inesperada del fichero dorado")
    _require(
        np.array_equal(matrix.scales, np.array(GOLDEN_SCALES, dtype=np.float32)),
        "Escalas distintas en el fichero dorado"
    )
    _require(
        np.array_equal(matrix.codes, np.array(GOLDEN_CODES, dtype=np.uint8)),
        "Códigos distintos en el fichero dorado"
    )
    _require(encode_qmat(matrix) == cfg.golden_path.read_bytes(), "La reescritura no es byte a byte idéntica")
    print(f"Fichero dorado: {cfg.golden_path}")
    return None


def check_csv_schema(cfg: VerifyConfig) -> Optional[str]:
    """La cabecera y el formato del CSV coinciden con el esquema fijado."""
    record = BenchRecord('gemv_quantizing', 1024, 1024, 1, 1, 'alloff', 10, 0.00125, 0.001, 2.097152)
    with tempfile.TemporaryDirectory() as tmp:
        path = Path(tmp) / 'schema.csv'
        emit_csv([record], path)
        text = path.read_text(encoding='utf-8')
        parsed = parse_csv(path)
    _require(text == f"{CSV_HEADER}\n{CSV_GOLDEN_ROW}\n", "El CSV no coincide con el esquema fijado")
    _require(parsed == [record], "El CSV no se relee con los mismos valores")
    return None


def check_baseline_speedup(cfg: VerifyConfig) -> Optional[str]:
    """Un hilo: kernel al menos tan rápido como el baseline en tamaños >= 1024."""
    sweep = SweepConfig(
        sizes=list(cfg.speedup_sizes),
        threads=[1],
        reps=cfg.speedup_reps,
        warmup=cfg.speedup_warmup,
        seed=cfg.seed
    )
    report = speedup_report(sweep_sizes(sweep))
    display_table(report, "\nAceleración medida:")
    graded = report[report['size'] >= SPEEDUP_MIN_SIZE]
    failed = graded[graded['status'] == 'fail']
    _require(failed.empty, f"Aceleración < 1.0 en tamaños {list(failed['size'])}")
    below_target = graded[graded['status'] == 'warn']
    if not below_target.empty:
        return f"aceleración por debajo de 1.3x en tamaños {list(below_target['size'])}"
    return None


def check_phase_ordering(cfg: VerifyConfig) -> Optional[str]:
    """Prefill con al menos tantos tokens/s como la generación."""
    model = build_toy_decoder(get_preset('toy'), cfg.seed, name='toy')
    wins = 0
    with RowParallelExecutor(cfg.phase_threads) as pool:
        for rep in range(cfg.phase_reps):
            _, prefill_stats = prefill(model, cfg.phase_prompt, executor=pool)
            generate_stats = generate(model, cfg.phase_tokens, executor=pool)
            prefill_tps = prefill_stats.tokens_per_second
            generate_tps = generate_stats.tokens_per_second
            print(f"Repetición {rep + 1}: prefill {prefill_tps:.1f} tok/s, generación {generate_tps:.1f} tok/s")
            wins += prefill_tps >= generate_tps
    _require(
        wins >= cfg.phase_required,
        f"Prefill más rápido en solo {wins} de {cfg.phase_reps} repeticiones"
    )
    return None


class VerificationSuite:
    """
    Clase para ejecutar las comprobaciones de forma secuencial y guardar su
    resultado.

    Attributes:
        config: Tamaños y semilla de la batería
        executed_checks: Comprobaciones ya ejecutadas
        failed_checks: Comprobaciones que fallaron
        warnings: Aviso de cada comprobación que pasó con aviso
    """

    # Descripción de las comprobaciones disponibles
    CHECKS = {
        1: "Cotas de ida y vuelta Q4/Q8",
        2: "Kernel frente al oráculo fp64",
        3: "Caminos escalar y vectorial idénticos",
        4: "Determinismo multihilo bit a bit",
        5: "GEMM fina igual a GEMV por columnas",
        6: "Equivalencia entre prefill y generación",
        7: "Contenedor .qmat dorado",
        8: "Esquema del CSV",
        9: "Aceleración frente al baseline",
        10: "Orden de fases: prefill frente a generación",
    }
    PERFORMANCE_CHECKS = frozenset({9, 10})

    RUNNERS: dict[int, Callable[[VerifyConfig], Optional[str]]] = {
        1: check_quant_bounds,
        2: check_kernel_oracle,
        3: check_path_equivalence,
        4: check_parallel_determinism,
        5: check_gemm_consistency,
        6: check_regime_equivalence,
        7: check_golden_qmat,
        8: check_csv_schema,
        9: check_baseline_speedup,
        10: check_phase_ordering,
    }

    def __init__(self, config: Optional[VerifyConfig] = None) -> None:
        self.config = config or VerifyConfig()
        self.executed_checks: set[int] = set()
        self.failed_checks: set[int] = set()
        self.warnings: dict[int, str] = {}

    def run_check(self, check_number: int) -> bool:
        """
        Ejecuta una comprobación e imprime OK, AVISO o FALLO.

        Args:
            check_number: Número de la comprobación (1-10)

        Returns:
            True si pasó (con o sin aviso), False si falló

        Raises:
            ValueError: Si el número de comprobación no existe
        """
        if check_number not in self.CHECKS:
            raise ValueError(f"Comprobación {check_number} no válida")

        print(f"\n--- PROPIEDAD {check_number}: {self.CHECKS[check_number]} ---")
        self.executed_checks.add(check_number)
        try:
            warning = self.RUNNERS[check_number](self.config)
        except AssertionError as e:
            print(f"FALLO: {e}")
        except ValueError as e:
            print(f"FALLO: error de validación: {e}")
        except RuntimeError as e:
            print(f"FALLO: error de ejecución: {e}")
        except OSError as e:
            print(f"FALLO: error de sistema: {e}")
        else:
            if warning:
                self.warnings[check_number] = warning
                print(f"AVISO: {warning}")
            else:
                print("OK")
            return True

        self.failed_checks.add(check_number)
        return False

    def run_all_checks(self) -> bool:
        """
        Ejecuta todas las comprobaciones (sin parar en el primer fallo).

        Returns:
            True si ninguna falló
        """
        self.executed_checks.clear()
        self.failed_checks.clear()
        self.warnings.clear()
        results = [
            self.run_check(number)
            for number in self.CHECKS
            if not (self.config.skip_performance and number in self.PERFORMANCE_CHECKS)
        ]
        return all(results)

    def summary(self) -> list[dict]:
        """Estado de cada comprobación ejecutada."""
        rows = []
        for number in sorted(self.executed_checks):
            if number in self.failed_checks:
                status = 'FALLO'
            elif number in self.warnings:
                status = 'AVISO'
            else:
                status = 'OK'
            rows.append({'n': number, 'propiedad': self.CHECKS[number], 'estado': status})
        return rows


def verify(config: Optional[VerifyConfig] = None) -> int:
    """
    Ejecuta la batería completa y devuelve el código de salida.

    Returns:
        0 si todo pasó, 1 si alguna comprobación falló
    """
    suite = VerificationSuite(config)
    passed = suite.run_all_checks()
    display_table(
        suite.summary(),
        "\n=== Resumen de verificación ===",
        TableConfig(headers=['N', 'Propiedad', 'Estado'])
    )
    return EXIT_OK if passed else EXIT_VERIFY_FAILED
