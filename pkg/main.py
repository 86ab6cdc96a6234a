#!/usr/bin/env python3
"""Punto de entrada de qbench: barridos de benchmarks, verificación y exportación."""

import argparse
import sys
from typing import Final, Optional, Sequence

from src.bench import (
    DEFAULT_REPS,
    DEFAULT_SEED,
    DEFAULT_SIZES,
    DEFAULT_WARMUP,
    SweepConfig,
    default_thread_counts,
    display_phases,
    display_speedup,
    emit_csv,
    sweep_sizes,
    sweep_threads,
    toolchain_comment,
)
from src.parallel import NumaPolicy
from src.toymodel import DEFAULT_GEN_TOKENS, DEFAULT_PROMPT_LEN, PRESETS, build_toy_decoder, export_model, get_preset
from src.utils import resolve_seed
from src.verification import verify

EXIT_USAGE: Final[int] = 2


def _int_list(text: str) -> list[int]:
    """Convierte '1,2,4' en [1, 2, 4] (tipo de argparse)."""
    try:
        return [int(item) for item in text.split(',') if item.strip()]
    except ValueError as e:
        raise argparse.ArgumentTypeError(f"Lista de enteros inválida: '{text}'") from e


def _policy_list(text: str) -> list[NumaPolicy]:
    """Convierte 'alloff,bind' en políticas (tipo de argparse)."""
    try:
        return [NumaPolicy.parse(item) for item in text.split(',') if item.strip()]
    except ValueError as e:
        raise argparse.ArgumentTypeError(str(e)) from e


def build_parser() -> argparse.ArgumentParser:
    """Construye el parser con los subcomandos sweep, threads, verify y export-model."""
    parser = argparse.ArgumentParser(
        prog='qbench',
        description='Kernels GEMV cuantizados Q4/Q8 y arnés de benchmarks'
    )
    commands = parser.add_subparsers(dest='command', required=True)

    sweep = commands.add_parser('sweep', help='Barrido de tamaños: kernel frente a baseline')
    sweep.add_argument('--sizes', type=_int_list, default=list(DEFAULT_SIZES),
                       help='Tamaños s de las matrices s×s, separados por comas')
    sweep.add_argument('--reps', type=int, default=DEFAULT_REPS, help='Repeticiones medidas')
    sweep.add_argument('--warmup', type=int, default=DEFAULT_WARMUP, help='Repeticiones de calentamiento')
    sweep.add_argument('--seed', type=int, default=DEFAULT_SEED, help='Semilla (QBENCH_SEED tiene prioridad)')
    sweep.add_argument('--out', default='sizes.csv', help='Fichero CSV de salida')

    threads = commands.add_parser('threads', help='Barrido de hilos y políticas NUMA')
    threads.add_argument('--preset', choices=sorted(PRESETS), default='toy', help='Dimensiones del modelo')
    threads.add_argument('--threads', type=_int_list, default=None,
                         help='Números de hilos, separados por comas')
    threads.add_argument('--policy', type=_policy_list, default=[NumaPolicy.MEMORY_INTERLEAVE],
                         help='Políticas: balancing, alloff, bind, interleave (separadas por comas)')
    threads.add_argument('--prompt', type=int, default=DEFAULT_PROMPT_LEN, help='Tokens del prompt')
    threads.add_argument('--tokens', type=int, default=DEFAULT_GEN_TOKENS, help='Tokens generados')
    threads.add_argument('--reps', type=int, default=1, help='Repeticiones medidas')
    threads.add_argument('--warmup', type=int, default=0, help='Repeticiones de calentamiento')
    threads.add_argument('--seed', type=int, default=DEFAULT_SEED, help='Semilla (QBENCH_SEED tiene prioridad)')
    threads.add_argument('--out', default='threads.csv', help='Fichero CSV de salida')

    commands.add_parser('verify', help='Ejecuta la batería de propiedades')

    export = commands.add_parser('export-model', help='Exporta los pesos del modelo sintético')
    export.add_argument('--preset', choices=sorted(PRESETS), default='toy', help='Dimensiones del modelo')
    export.add_argument('--dir', default='weights', help='Directorio de salida')
    export.add_argument('--seed', type=int, default=DEFAULT_SEED, help='Semilla (QBENCH_SEED tiene prioridad)')

    return parser


def run_sweep(args: argparse.Namespace) -> int:
    cfg = SweepConfig(sizes=args.sizes, threads=[1], reps=args.reps,
                      warmup=args.warmup, seed=resolve_seed(args.seed))
    records = sweep_sizes(cfg)
    display_speedup(records)
    path = emit_csv(records, args.out, comment=toolchain_comment())
    print(f"\nResultados guardados en: {path}")
    return 0


def run_threads(args: argparse.Namespace) -> int:
    cfg = SweepConfig(
        threads=args.threads or default_thread_counts(),
        policies=args.policy,
        reps=args.reps,
        warmup=args.warmup,
        seed=resolve_seed(args.seed)
    )
    records = sweep_threads(cfg, get_preset(args.preset), args.prompt, args.tokens)
    display_phases(records)
    path = emit_csv(records, args.out, comment=toolchain_comment())
    print(f"\nResultados guardados en: {path}")
    return 0


def run_export(args: argparse.Namespace) -> int:
    model = build_toy_decoder(get_preset(args.preset), resolve_seed(args.seed), name=args.preset)
    export_model(model, args.dir)
    return 0


def main(argv: Optional[Sequence[str]] = None) -> int:
    """
    Función principal que maneja los argumentos de línea de comandos.

    Returns:
        0 si todo fue bien, 1 si la verificación falló, 2 si hubo un error de uso
    """
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return EXIT_USAGE if e.code else 0

    try:
        if args.command == 'sweep':
            return run_sweep(args)
        if args.command == 'threads':
            return run_threads(args)
        if args.command == 'export-model':
            return run_export(args)
        return verify()
    except ValueError as e:
        print(f"Error de uso: {e}")
        return EXIT_USAGE
    except OSError as e:
        print(f"Error de sistema: {e}")
        return EXIT_USAGE


if __name__ == '__main__':
    sys.exit(main())
