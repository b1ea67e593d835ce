"""The 32 CTPA abnormalities and their 7 anatomical regions."""

from __future__ import annotations

import re

REGIONS = (
    "Pulmonary Arteries",
    "Lungs and Airways",
    "Pleura",
    "Heart",
    "Mediastinum and Hila",
    "Chest Wall and Lower Neck",
    "Bones",
)

# (name, region index); index in this tuple is the abnormality id k
_ENTRIES = (
    ("Acute pulmonary embolism", 0),
    ("Chronic pulmonary embolism", 0),
    ("Main pulmonary artery PE", 0),
    ("Lobar pulmonary artery PE", 0),
    ("Pulmonary embolism", 0),
    ("Pulmonary artery enlargement", 0),
    ("Emphysema", 1),
    ("Atelectasis", 1),
    ("Lung nodule", 1),
    ("Lung opacity", 1),
    ("Pulmonary fibrotic sequela", 1),
    ("Mosaic attenuation pattern", 1),
    ("Pulmonary consolidation", 1),
    ("Interlobular septal thickening", 1),
    ("Peribronchial thickening", 1),
    ("Bronchiectasis", 1),
    ("Pulmonary edema", 1),
    ("Pleural effusion", 2),
    ("Pneumothorax", 2),
    ("Pleural thickening", 2),
    ("Cardiomegaly", 3),
    ("Coronary artery calcification", 3),
    ("Right heart strain", 3),
    ("Pericardial effusion", 3),
    ("Lymphadenopathy", 4),
    ("Hiatal hernia", 4),
    ("Atherosclerotic calcification", 4),
    ("Esophageal thickening", 4),
    ("Thyroid nodule", 5),
    ("Chest wall lesion", 5),
    ("Vertebral fracture", 6),
    ("Bone lesion", 6),
)

NAMES: tuple[str, ...] = tuple(n for n, _ in _ENTRIES)
N_ABN = len(NAMES)
REGION_OF: tuple[int, ...] = tuple(r for _, r in _ENTRIES)


def region_of(k: int) -> int:
    return REGION_OF[k]


def region_members(r: int) -> list[int]:
    return [k for k in range(N_ABN) if REGION_OF[k] == r]


def name_tokens(k: int) -> list[str]:
    """Lower-cased word tokens of abnormality ``k`` (also its CE keyword)."""
    return NAMES[k].lower().split()


def slug(text: str) -> str:
    return re.sub(r"[^a-z0-9]+", "_", text.lower()).strip("_")


assert N_ABN == 32
assert len(set(NAMES)) == N_ABN
assert set(REGION_OF) == set(range(len(REGIONS)))
