"""Fixed feature vocabularies and modality ordering.

Lab, vital and medication names follow the structured-EHR feature table
used by the model. Two lab names appear twice in that table; the second
occurrence carries a ``" (2)"`` suffix so names stay unique in CSV files.
"""

_LAB_COLUMNS = [
    [
        "Mean Corpuscular Hemoglobin", "Red Cell Distribution Width",
        "Mean Corpuscular Hemoglobin Concentration", "Mean Corpuscular Volume",
        "Alanine Aminotransferase", "Aspartate Aminotransferase", "Anion Gap",
        "MRI Brain W/Wo Contrast", "Creatinine Level", "Bun/Creatinine Ratio",
        "Hematocrit Test", "Hemoglobin", "Blood Urea Nitrogen",
        "Mean Platelet Volume", "Calcium Level Total", "Sodium Level",
        "Thyroid Stimulating Hormone", "Segs-Bands",
    ],
    [
        "Carbon Dioxide", "Basophils", "White Blood Cell Count", "Hematocrit",
        "Red Blood Cell Count", "Platelet Count", "Total Protein", "Bili Total",
        "Alkaline Phosphatase", "Albumin Level", "Globulin", "Neutrophils",
        "Lymphocytes", "Absolute Eosinophils", "Basophils", "Absolute Monocytes",
        "Absolute Neutrophils", "Absolute Basophils",
    ],
    [
        "Albumin", "Glucose Level", "eGFR", "Albumin/Globulin Ratio",
        "Eosinophils", "Potassium Level", "Creatinine", "Bilirubin, Direct",
        "Bun/Creatinine Ratio", "Potassium", "Systolic",
        "MRI Spine Cervical W Wo Contrast", "Brain W/Wo Contrast MRI",
        "Body Surface Area", "Bilirubin, Indirect", "Segmented Neutrophils",
        "Monocytes", "Chloride Level",
    ],
]


def _dedupe(names):
    seen = {}
    out = []
    for name in names:
        seen[name] = seen.get(name, 0) + 1
        out.append(name if seen[name] == 1 else f"{name} ({seen[name]})")
    return out


LAB_FEATURES = tuple(_dedupe([n for col in _LAB_COLUMNS for n in col]))

VITAL_FEATURES = (
    "Diastolic Blood Pressure", "Systolic Blood Pressure", "Heart Rate",
    "Weight", "Height", "BMI", "O2 Saturation", "Pulse", "Temperature",
    "Respiration",
)

MED_FEATURES = (
    "Baclofen", "Gabapentin", "Copaxone", "Gilenya", "Tecfidera", "Aubagio",
    "Ampyra", "Prednisone", "Vitamin", "Duloxetine", "Dalfampridine",
    "Clonazepam",
)

FEATURES = {"labs": LAB_FEATURES, "vitals": VITAL_FEATURES, "meds": MED_FEATURES}
CATEGORIES = ("labs", "vitals", "meds")

SEQUENCE_TAGS = ("T1pre", "T1post", "T2", "FLAIR", "PD")

# Rows of the fusion matrix, in causal order.
MODALITY_ORDER = ("vitals", "labs", "T1pre", "T1post", "T2", "FLAIR", "PD", "notes", "meds")

GROUPS = {
    "ehr": ("vitals", "labs", "meds"),
    "mri": SEQUENCE_TAGS,
    "notes": ("notes",),
}

SEX = ("male", "female")
RACE = ("white", "black", "asian", "other")
ETHNICITY = ("hispanic", "non-hispanic")
DEMOGRAPHICS_DIM = 1 + len(SEX) + len(RACE) + len(ETHNICITY)

AGE_MIN, AGE_MAX = 19.0, 71.0

# Planted signal carriers.
SIGNAL_LAB = "Absolute Neutrophils"
SIGNAL_MEDS = ("Baclofen", "Gabapentin", "Ampyra", "Dalfampridine")

SEVERITY_KEYWORDS = (
    "spasticity", "ataxia", "wheelchair", "cane", "walker", "paraparesis",
    "falls", "weakness", "hemiparesis", "incontinence", "dysarthria",
    "nystagmus", "tremor", "fatigue", "numbness", "imbalance", "bedbound",
    "hyperreflexia", "clonus", "scooter",
)

assert len(LAB_FEATURES) == 54 and len(set(LAB_FEATURES)) == 54
assert len(VITAL_FEATURES) == 10 and len(MED_FEATURES) == 12


def parse_groups(spec):
    """Parse ``"mri,notes"`` into a tuple of group names."""
    groups = tuple(g.strip().lower() for g in spec.split(",") if g.strip())
    if not groups:
        raise ValueError("empty modality group subset")
    for g in groups:
        if g not in GROUPS:
            raise ValueError(f"unknown modality group {g!r}; expected one of {sorted(GROUPS)}")
    return groups


def modalities_for(groups):
    return frozenset(m for g in groups for m in GROUPS[g])
