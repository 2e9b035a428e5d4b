from __future__ import annotations

from pathlib import Path

import pytest

from halloffame import SchemaCatalog, Store, load_catalog

DATA_DIR = Path(__file__).parent / "data"


def load_dataset(name: str) -> tuple[SchemaCatalog, Store]:
    base = DATA_DIR / name
    catalog = load_catalog((base / "catalog.yaml").read_text(encoding="utf-8"))
    store = Store(catalog)
    for rel in catalog.relations:
        store.load_table(rel.name, (base / f"{rel.name}.csv").read_text(encoding="utf-8"))
    return catalog, store


def load_instance(inst) -> tuple[SchemaCatalog, Store]:
    """Load one of the randomly generated oracle instances."""
    catalog = load_catalog(inst.config_text)
    store = Store(catalog)
    for name, text in inst.csvs.items():
        store.load_table(name, text)
    return catalog, store


@pytest.fixture
def bloomberg() -> tuple[SchemaCatalog, Store]:
    return load_dataset("bloomberg")


@pytest.fixture
def bloomberg_dir() -> Path:
    return DATA_DIR / "bloomberg"
