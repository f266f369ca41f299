from __future__ import annotations

from functools import lru_cache

from vfckit.gcs import build_gcs
from vfckit.perturbation import build_cfp_system, build_multivalued_perturbation
from vfckit.scenario import load_scenario


@lru_cache(maxsize=None)
def scenario(name: str):
    return load_scenario(f"gallery:{name}")


@lru_cache(maxsize=None)
def built(name: str, presentation: str = ""):
    """(gcs, KG record, report) for a gallery scenario (optionally one presentation)."""
    sc = scenario(name)
    labels = sc.presentations[presentation] if presentation else None
    return build_gcs(sc.structure(labels))


@lru_cache(maxsize=None)
def mvp(name: str, seed: int = 0, presentation: str = ""):
    return build_multivalued_perturbation(built(name, presentation)[0], seed=seed)


@lru_cache(maxsize=None)
def cfps(name: str, presentation: str = ""):
    return build_cfp_system(built(name, presentation)[0])[0]
