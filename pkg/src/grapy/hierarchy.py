"""Three-level label hierarchy and coarsening of fine label maps.

Level 1 and Level 2 are fixed across all datasets; Level 3 is the
dataset-specific fine list. A label map is a plain 2-D integer array.
"""

from __future__ import annotations

import os
from dataclasses import dataclass

import numpy as np

LEVEL1_LABELS = ("Background", "Foreground")
LEVEL2_LABELS = ("Background", "Head", "Torso", "Arm", "Leg")
LEVEL2_TO_LEVEL1 = (0, 1, 1, 1, 1)
K1 = len(LEVEL1_LABELS)
K2 = len(LEVEL2_LABELS)


class TaxonomyError(ValueError):
    """Invalid taxonomy or label map."""


@dataclass(frozen=True)
class Taxonomy:
    """Fine label list plus its mapping into the fixed Level-2 categories."""

    dataset_name: str
    fine_labels: tuple[str, ...]
    to_level2: tuple[int, ...]

    @property
    def k3(self) -> int:
        return len(self.fine_labels)

    def k_at(self, level: int) -> int:
        return {1: K1, 2: K2, 3: self.k3}[level]

    def labels_at(self, level: int) -> tuple[str, ...]:
        return {1: LEVEL1_LABELS, 2: LEVEL2_LABELS, 3: self.fine_labels}[level]

    def table_to(self, level: int) -> np.ndarray:
        """Fine-index -> level-index lookup table (identity at level 3)."""
        t2 = np.asarray(self.to_level2, dtype=np.int64)
        if level == 3:
            return np.arange(self.k3, dtype=np.int64)
        if level == 2:
            return t2
        if level == 1:
            return np.asarray(LEVEL2_TO_LEVEL1, dtype=np.int64)[t2]
        raise TaxonomyError(f"level must be 1, 2 or 3, got {level}")

    def fine_index(self, name: str) -> int:
        return self.fine_labels.index(name)


def validate(tax: Taxonomy) -> list[str]:
    """Check every taxonomy invariant; returns a list of violations (empty = ok)."""
    problems = []
    if not tax.fine_labels:
        return ["fine label list is empty"]
    if tax.fine_labels[0] != "Background":
        problems.append(f"fine index 0 must be Background, got {tax.fine_labels[0]!r}")
    if len(set(tax.fine_labels)) != len(tax.fine_labels):
        problems.append("fine label names are not unique")
    if len(tax.to_level2) != len(tax.fine_labels):
        problems.append(f"to_level2 covers {len(tax.to_level2)} fine indices, "
                        f"need {len(tax.fine_labels)}")
        return problems
    for i, l2 in enumerate(tax.to_level2):
        if not 0 <= l2 < K2:
            problems.append(f"fine index {i} maps to invalid Level-2 index {l2}")
    if tax.to_level2 and tax.to_level2[0] != 0:
        problems.append("Background must map to Background at Level 2")
    for i in range(1, len(tax.to_level2)):
        if tax.to_level2[i] == 0:
            problems.append(f"non-background fine label {tax.fine_labels[i]!r} "
                            "maps to Background at Level 2")
    return problems


def coarsen(m: np.ndarray, tax: Taxonomy, level: int) -> np.ndarray:
    """Map a fine (Level-3) label map pixelwise to Level 1 or Level 2."""
    if level not in (1, 2, 3):
        raise TaxonomyError(f"level must be 1, 2 or 3, got {level}")
    m = np.asarray(m)
    if m.size and (m.min() < 0 or m.max() >= tax.k3):
        raise TaxonomyError(f"label map holds values outside [0, {tax.k3})")
    return tax.table_to(level)[m]


def builtin_taxonomies() -> tuple[Taxonomy, Taxonomy, Taxonomy]:
    """The three built-in synthetic taxonomies (7, 12 and 10 fine labels).

    All three share Level 1 and Level 2 but split the body differently at
    Level 3, so every pair disagrees on at least one fine split.
    """
    a = Taxonomy(
        dataset_name="A",
        fine_labels=("Background", "Head", "Torso", "UpperArm", "LowerArm",
                     "UpperLeg", "LowerLeg"),
        to_level2=(0, 1, 2, 3, 3, 4, 4),
    )
    b = Taxonomy(
        dataset_name="B",
        fine_labels=("Background", "Face", "Hair", "Hat", "TorsoSkin", "UpperClothes",
                     "UpperArm", "LowerArm", "Pants", "UpperLeg", "LowerLeg", "Shoe"),
        to_level2=(0, 1, 1, 1, 2, 2, 3, 3, 4, 4, 4, 4),
    )
    c = Taxonomy(
        dataset_name="C",
        fine_labels=("Background", "Face", "Hair", "Torso", "Arm", "Hand",
                     "UpperLeg", "LowerLeg", "Shoe", "Belt"),
        to_level2=(0, 1, 1, 2, 3, 3, 4, 4, 4, 2),
    )
    for tax in (a, b, c):
        bad = validate(tax)
        assert not bad, bad
    return a, b, c


def taxonomy_by_name(name: str) -> Taxonomy:
    for tax in builtin_taxonomies():
        if tax.dataset_name == name:
            return tax
    raise TaxonomyError(f"unknown taxonomy {name!r}; built-ins are A, B, C")


def load_taxonomy(path, dataset_name: str | None = None) -> Taxonomy:
    """Read a taxonomy config: one `fine_index<TAB>fine_name<TAB>level2_name` per line."""
    rows: dict[int, tuple[str, str]] = {}
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            parts = line.split("\t")
            if len(parts) != 3:
                raise TaxonomyError(f"{path}:{lineno}: need 3 tab-separated fields, got {len(parts)}")
            idx_s, fine_name, l2_name = parts
            try:
                idx = int(idx_s)
            except ValueError:
                raise TaxonomyError(f"{path}:{lineno}: bad fine index {idx_s!r}") from None
            if l2_name not in LEVEL2_LABELS:
                raise TaxonomyError(f"{path}:{lineno}: unknown Level-2 label {l2_name!r}")
            if idx in rows:
                raise TaxonomyError(f"{path}:{lineno}: duplicate fine index {idx}")
            rows[idx] = (fine_name, l2_name)
    if sorted(rows) != list(range(len(rows))):
        raise TaxonomyError(f"{path}: fine indices must be contiguous from 0")
    fine = tuple(rows[i][0] for i in range(len(rows)))
    to_l2 = tuple(LEVEL2_LABELS.index(rows[i][1]) for i in range(len(rows)))
    tax = Taxonomy(dataset_name=dataset_name or os.path.splitext(os.path.basename(path))[0],
                   fine_labels=fine, to_level2=to_l2)
    bad = validate(tax)
    if bad:
        raise TaxonomyError(f"{path}: invalid taxonomy: " + "; ".join(bad))
    return tax


def save_taxonomy(path, tax: Taxonomy) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for i, name in enumerate(tax.fine_labels):
            fh.write(f"{i}\t{name}\t{LEVEL2_LABELS[tax.to_level2[i]]}\n")
