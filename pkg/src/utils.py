"""
Módulo de utilidades compartidas: tablas de consola y generadores aleatorios
con semilla.
"""

import os
from typing import Final, Optional, Sequence, Union, Dict
from dataclasses import dataclass
import numpy as np
import pandas as pd
from tabulate import tabulate

DataFrame = pd.DataFrame

SEED_ENV_VAR: Final[str] = 'QBENCH_SEED'


@dataclass
class TableConfig:
    """Configuración para el formato de tablas."""
    headers: Union[str, Sequence[str], Dict[str, str]] = 'keys'
    table_format: str = 'pretty'
    show_index: bool = False
    num_align: str = 'right'
    float_format: str = '.4g'
    max_rows: Optional[int] = None


def display_table(
    data: DataFrame | Sequence[dict],
    title: str,
    config: Optional[TableConfig] = None
) -> None:
    """
    Muestra una tabla formateada con los datos proporcionados.

    Args:
        data: DataFrame o lista de registros (diccionarios) a mostrar
        title: Título de la tabla
        config: Configuración opcional para el formato
    """
    if config is None:
        config = TableConfig()

    frame = data if isinstance(data, pd.DataFrame) else pd.DataFrame(list(data))
    display_data = frame.head(config.max_rows) if config.max_rows else frame

    print(title)
    print(tabulate(
        display_data,
        headers=config.headers,
        tablefmt=config.table_format,
        showindex=config.show_index,
        numalign=config.num_align,
        floatfmt=config.float_format
    ))


def make_rng(seed: int, *stream: int) -> np.random.Generator:
    """
    Crea un generador determinista para un flujo concreto de una semilla.

    Args:
        seed: Semilla global
        stream: Identificadores del flujo (capa, matriz, posición...)

    Returns:
        Generador numpy reproducible
    """
    return np.random.default_rng([seed, *stream])


def resolve_seed(seed: int) -> int:
    """
    Devuelve la semilla efectiva: QBENCH_SEED tiene prioridad sobre ``seed``.

    Raises:
        ValueError: Si la variable de entorno no es un entero no negativo
    """
    value = os.environ.get(SEED_ENV_VAR)
    if value is None or not value.strip():
        return seed
    try:
        resolved = int(value)
    except ValueError as e:
        raise ValueError(f"{SEED_ENV_VAR} debe ser un entero: '{value}'") from e
    if resolved < 0:
        raise ValueError(f"{SEED_ENV_VAR} debe ser no negativa: {resolved}")
    return resolved
