"""Cohort directory layout and the ``.msv`` volume format.

Layout under the cohort root::

    cohort.json
    <patient_id>/labs.csv, vitals.csv, meds.csv
    <patient_id>/note_<k>.txt
    <patient_id>/vol_<tag>.msv

A ``.msv`` file is the magic ``MSVOL1``, three little-endian uint32 dims,
then x*y*z little-endian float32 voxels in C order.
"""

from __future__ import annotations

import csv
import dataclasses
import datetime as dt
import io
import json
import os
import string
import tempfile
from pathlib import Path

import numpy as np

from . import vocab
from .synth import DemographicsVector, PatientRecord, SynthConfig, Volume

MSV_MAGIC = b"MSVOL1"
_EPOCH = dt.datetime(1970, 1, 1)
_PUNCT = str.maketrans("", "", string.punctuation)


def atomic_write_bytes(path, data):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def atomic_write_text(path, text):
    atomic_write_bytes(path, text.encode("utf-8"))


def encode_msv(volume):
    vox = np.ascontiguousarray(volume.voxels, dtype="<f4")
    header = MSV_MAGIC + np.asarray(volume.dims, dtype="<u4").tobytes()
    return header + vox.tobytes(order="C")


def decode_msv(data):
    if data[:6] != MSV_MAGIC:
        raise ValueError("not an MSVOL1 file")
    dims = tuple(int(d) for d in np.frombuffer(data[6:18], dtype="<u4"))
    n = dims[0] * dims[1] * dims[2]
    body = data[18:]
    if len(body) != 4 * n:
        raise ValueError(f"voxel payload has {len(body)} bytes, expected {4 * n}")
    vox = np.frombuffer(body, dtype="<f4").astype(np.float32).reshape(dims)
    if not np.all(np.isfinite(vox)):
        raise ValueError("volume contains non-finite voxels")
    return Volume(dims, vox)


def write_msv(path, volume):
    atomic_write_bytes(path, encode_msv(volume))


def read_msv(path):
    return decode_msv(Path(path).read_bytes())


def iso(seconds):
    return (_EPOCH + dt.timedelta(seconds=int(seconds))).isoformat()


def from_iso(text):
    return int((dt.datetime.fromisoformat(text) - _EPOCH).total_seconds())


def tokenize(text):
    """Lowercase, strip ASCII punctuation, split on whitespace."""
    return text.lower().translate(_PUNCT).split()


def _events_csv(events, names):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["timestamp", "feature", "value"])
    for t, j, v in events:
        w.writerow([iso(t), names[j], repr(float(v))])
    return buf.getvalue()


def _read_events(path, names):
    index = {n: i for i, n in enumerate(names)}
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.DictReader(fh))
    out = []
    for r in rows:
        if r["feature"] not in index:
            raise ValueError(f"{path}: unknown feature {r['feature']!r}")
        out.append((from_iso(r["timestamp"]), index[r["feature"]], float(r["value"])))
    return out


def _patient_json(p):
    d = p.demographics
    return {
        "patient_id": p.patient_id,
        "demographics": {"age": d.age, "sex": list(d.sex), "race": list(d.race), "ethnicity": list(d.ethnicity)},
        "encounters": [[iso(a), iso(b)] for a, b in p.encounters],
        "edss_per_visit": list(p.edss_per_visit),
        "notes": [{"file": f"note_{k}.txt", "encounter": enc} for k, (enc, _) in enumerate(p.notes)],
        "volumes": [f"vol_{tag}.msv" for tag, _ in p.volumes],
        "latent_severity": p.latent_severity,
        "generator": p.meta,
    }


def write_cohort(root, cohort, config=None, force=False):
    """Serialize a cohort; output bytes depend only on the records."""
    root = Path(root)
    if root.exists() and any(root.iterdir()) and not force:
        raise FileExistsError(f"{root} exists and is not empty (use --force)")
    root.mkdir(parents=True, exist_ok=True)
    for p in cohort:
        pdir = root / p.patient_id
        atomic_write_text(pdir / "labs.csv", _events_csv(p.lab_events, vocab.LAB_FEATURES))
        atomic_write_text(pdir / "vitals.csv", _events_csv(p.vital_events, vocab.VITAL_FEATURES))
        atomic_write_text(pdir / "meds.csv", _events_csv(p.med_events, vocab.MED_FEATURES))
        for k, (_, tokens) in enumerate(p.notes):
            atomic_write_text(pdir / f"note_{k}.txt", " ".join(tokens) + "\n")
        for tag, vol in p.volumes:
            write_msv(pdir / f"vol_{tag}.msv", vol)
    index = {
        "format": "msfuse-cohort/1",
        "config": dataclasses.asdict(config) if config is not None else None,
        "patients": [_patient_json(p) for p in cohort],
    }
    atomic_write_text(root / "cohort.json", json.dumps(index, indent=1, sort_keys=True) + "\n")


def read_cohort(root):
    root = Path(root)
    index_path = root / "cohort.json"
    if not index_path.exists():
        raise FileNotFoundError(f"missing cohort index: {index_path}")
    index = json.loads(index_path.read_text(encoding="utf-8"))
    cohort = []
    for pj in index["patients"]:
        pdir = root / pj["patient_id"]
        d = pj["demographics"]
        notes = []
        for n in pj["notes"]:
            notes.append((n["encounter"], tokenize((pdir / n["file"]).read_text(encoding="utf-8"))))
        volumes = []
        for fname in pj["volumes"]:
            tag = fname[len("vol_"):-len(".msv")]
            volumes.append((tag, read_msv(pdir / fname)))
        cohort.append(PatientRecord(
            patient_id=pj["patient_id"],
            encounters=[(from_iso(a), from_iso(b)) for a, b in pj["encounters"]],
            lab_events=_read_events(pdir / "labs.csv", vocab.LAB_FEATURES),
            vital_events=_read_events(pdir / "vitals.csv", vocab.VITAL_FEATURES),
            med_events=_read_events(pdir / "meds.csv", vocab.MED_FEATURES),
            notes=notes,
            volumes=volumes,
            demographics=DemographicsVector(d["age"], tuple(d["sex"]), tuple(d["race"]), tuple(d["ethnicity"])),
            edss_per_visit=list(pj["edss_per_visit"]),
            latent_severity=pj["latent_severity"],
            meta=pj["generator"],
        ))
    return cohort


def read_config(root):
    raw = json.loads((Path(root) / "cohort.json").read_text(encoding="utf-8"))["config"]
    return SynthConfig(**raw) if raw else None
