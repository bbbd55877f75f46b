"""Cohort disk format, preprocessing selectors, and the access audit.

A cohort directory holds one ``manifest.json`` plus one raw little-endian
float32 binary per array (``<case_id>.<field>.f32``, row-major) and an
optional two-column ``geneset.tsv`` mapping gene ids to TUMOR/TME labels.
Synthetic and real cohorts share this single loading path.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .data import Case, Cohort, SlideGrid, dense_grid

MANIFEST_VERSION = 1
MANIFEST_NAME = "manifest.json"
GENESET_NAME = "geneset.tsv"

_LABEL_RANGES = {"diagnosis": 4, "grade": 3, "surv_bin": 4}


class ManifestError(ValueError):
    """Raised for structurally invalid manifests or array files."""


class GenesetError(ValueError):
    """Raised for malformed geneset files."""


class AccessAudit:
    """Append-only log of data reads and preprocessing fits.

    Used to assert fold hygiene: no test-fold case id may appear in a fit
    event, and slide-only evaluation must never read gene arrays.
    """

    def __init__(self) -> None:
        self.records: list[dict] = []

    def log(self, event: str, **detail) -> None:
        self.records.append({"event": event, **detail})

    def case_ids(self, event: str) -> set[str]:
        ids: set[str] = set()
        for rec in self.records:
            if rec["event"] != event:
                continue
            if "case_id" in rec:
                ids.add(rec["case_id"])
            ids.update(rec.get("case_ids", ()))
        return ids

    def events(self, prefix: str = "") -> list[dict]:
        return [r for r in self.records if r["event"].startswith(prefix)]

    def to_json(self) -> str:
        return json.dumps(self.records, sort_keys=True, indent=2) + "\n"


@dataclass
class CaseEntry:
    case_id: str
    grid10: str
    grid20: str
    genes: str
    labels: dict
    censored: bool
    mask10: str | None = None


@dataclass
class CohortManifest:
    version: int
    dims: dict
    gene_ids: list[str]
    cases: list[CaseEntry]
    root: Path = field(default_factory=Path)


@dataclass
class GenePartition:
    """Index split of a gene universe into tumor and TME subsets."""

    tumor_idx: np.ndarray
    tme_idx: np.ndarray
    n_unlisted: int = 0


def _expected_floats(dims: dict, field_name: str) -> int:
    if field_name == "grid10":
        return dims["h10"] * dims["w10"] * dims["c"]
    if field_name == "grid20":
        return dims["h20"] * dims["w20"] * dims["c"]
    if field_name == "genes":
        return dims["n_genes"]
    if field_name == "mask10":
        return dims["h10"] * dims["w10"]
    raise KeyError(field_name)


def load_manifest(path: str | Path) -> CohortManifest:
    """Load and validate ``manifest.json`` from a cohort directory."""
    root = Path(path)
    if root.is_dir():
        manifest_path = root / MANIFEST_NAME
    else:
        manifest_path, root = root, root.parent
    if not manifest_path.exists():
        raise ManifestError(f"no manifest at {manifest_path}")
    with open(manifest_path, "r", encoding="utf-8") as fh:
        raw = json.load(fh)

    version = raw.get("version")
    if version != MANIFEST_VERSION:
        raise ManifestError(f"unsupported manifest version {version!r}")
    dims = raw["dims"]
    for key in ("h10", "w10", "h20", "w20", "c", "n_genes"):
        if key not in dims or int(dims[key]) < 1:
            raise ManifestError(f"dims entry {key!r} missing or invalid")
    gene_ids = list(raw["gene_ids"])
    if len(gene_ids) != dims["n_genes"]:
        raise ManifestError(
            f"gene_ids length {len(gene_ids)} != n_genes {dims['n_genes']}"
        )

    entries: list[CaseEntry] = []
    seen: set[str] = set()
    for rec in raw["cases"]:
        cid = rec["case_id"]
        if cid in seen:
            raise ManifestError(f"duplicate case_id {cid!r}")
        seen.add(cid)
        entry = CaseEntry(
            case_id=cid,
            grid10=rec["grid10"],
            grid20=rec["grid20"],
            genes=rec["genes"],
            labels=dict(rec["labels"]),
            censored=bool(rec["censored"]),
            mask10=rec.get("mask10"),
        )
        for name, n_classes in _LABEL_RANGES.items():
            value = entry.labels.get(name)
            if value is None or not 0 <= int(value) < n_classes:
                raise ManifestError(f"case {cid}: label {name}={value!r} out of range")
        if float(entry.labels.get("surv_time", 1.0)) <= 0:
            raise ManifestError(f"case {cid}: surv_time must be positive")
        for field_name in ("grid10", "grid20", "genes", "mask10"):
            rel = getattr(entry, field_name)
            if rel is None:
                continue
            file_path = root / rel
            if not file_path.exists():
                raise ManifestError(f"case {cid}: missing file {rel}")
            expected = _expected_floats(dims, field_name) * 4
            actual = file_path.stat().st_size
            if actual != expected:
                raise ManifestError(
                    f"case {cid}: {field_name} holds {actual} bytes, expected {expected} for declared dims"
                )
        entries.append(entry)

    return CohortManifest(version=version, dims=dims, gene_ids=gene_ids, cases=entries, root=root)


def read_case_array(
    manifest: CohortManifest,
    entry: CaseEntry,
    field_name: str,
    audit: AccessAudit | None = None,
) -> np.ndarray:
    """Read one case array, reshaped per the manifest dims."""
    rel = getattr(entry, field_name)
    if rel is None:
        raise ManifestError(f"case {entry.case_id} has no {field_name} array")
    if audit is not None:
        audit.log("read_array", case_id=entry.case_id, field=field_name)
    flat = np.fromfile(manifest.root / rel, dtype="<f4")
    dims = manifest.dims
    if field_name == "grid10":
        return flat.reshape(dims["h10"], dims["w10"], dims["c"])
    if field_name == "grid20":
        return flat.reshape(dims["h20"], dims["w20"], dims["c"])
    if field_name == "genes":
        return flat
    if field_name == "mask10":
        return flat.reshape(dims["h10"], dims["w10"])
    raise KeyError(field_name)


def _load_geneset_split(root: Path, gene_ids: list[str]) -> tuple[np.ndarray, np.ndarray]:
    geneset_path = root / GENESET_NAME
    if geneset_path.exists():
        part = partition_genes(gene_ids, geneset_path)
        return part.tumor_idx, part.tme_idx
    # No bundled split: treat the whole universe as one (tumor) block so the
    # full expression vector is still representable per case.
    return np.arange(len(gene_ids)), np.arange(0)


def load_cohort(
    path: str | Path,
    with_genes: bool = True,
    audit: AccessAudit | None = None,
) -> Cohort:
    """Materialize a cohort directory into memory.

    ``with_genes=False`` skips gene arrays entirely (slide-only runs); the
    audit then shows no gene reads for any case.
    """
    manifest = load_manifest(path)
    tumor_idx, tme_idx = _load_geneset_split(manifest.root, manifest.gene_ids)
    cases: list[Case] = []
    for entry in manifest.cases:
        grid10 = dense_grid(read_case_array(manifest, entry, "grid10", audit))
        grid20 = dense_grid(read_case_array(manifest, entry, "grid20", audit))
        if with_genes:
            full = read_case_array(manifest, entry, "genes", audit)
            genes_tumor = full[tumor_idx]
            genes_tme = full[tme_idx]
        else:
            genes_tumor = np.zeros(0, dtype=np.float32)
            genes_tme = np.zeros(0, dtype=np.float32)
        mask = None
        if entry.mask10 is not None:
            mask = read_case_array(manifest, entry, "mask10", audit) > 0.5
        cases.append(
            Case(
                case_id=entry.case_id,
                genes_tumor=genes_tumor,
                genes_tme=genes_tme,
                grid10=grid10,
                grid20=grid20,
                diagnosis=int(entry.labels["diagnosis"]),
                grade=int(entry.labels["grade"]),
                surv_bin=int(entry.labels["surv_bin"]),
                surv_time=float(entry.labels.get("surv_time", 1.0)),
                censored=entry.censored,
                tumor_mask10=mask,
            )
        )
    return Cohort(
        cases=cases,
        gene_ids=manifest.gene_ids,
        tumor_idx=tumor_idx,
        tme_idx=tme_idx,
        dims=dict(manifest.dims),
    )


def write_cohort(cohort: Cohort, out_dir: str | Path) -> Path:
    """Serialize a cohort to the manifest+binary format. Deterministic."""
    root = Path(out_dir)
    root.mkdir(parents=True, exist_ok=True)
    entries = []
    for case in cohort.cases:
        files = {
            "grid10": f"{case.case_id}.grid10.f32",
            "grid20": f"{case.case_id}.grid20.f32",
            "genes": f"{case.case_id}.genes.f32",
        }
        case.grid10.data.astype("<f4").tofile(root / files["grid10"])
        case.grid20.data.astype("<f4").tofile(root / files["grid20"])
        cohort.full_expression(case).astype("<f4").tofile(root / files["genes"])
        rec = {
            "case_id": case.case_id,
            **files,
            "labels": {
                "diagnosis": case.diagnosis,
                "grade": case.grade,
                "surv_bin": case.surv_bin,
                "surv_time": case.surv_time,
            },
            "censored": bool(case.censored),
        }
        if case.tumor_mask10 is not None:
            rec["mask10"] = f"{case.case_id}.mask10.f32"
            case.tumor_mask10.astype("<f4").tofile(root / rec["mask10"])
        entries.append(rec)

    manifest = {
        "version": MANIFEST_VERSION,
        "dims": cohort.dims,
        "gene_ids": cohort.gene_ids,
        "cases": entries,
    }
    with open(root / MANIFEST_NAME, "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, sort_keys=True, indent=2)
        fh.write("\n")

    if len(cohort.tumor_idx) or len(cohort.tme_idx):
        labels = cohort.geneset()
        with open(root / GENESET_NAME, "w", encoding="utf-8") as fh:
            fh.write("# gene_id<TAB>label (TUMOR or TME)\n")
            for gid in cohort.gene_ids:
                if gid in labels:
                    fh.write(f"{gid}\t{labels[gid]}\n")
    return root


def select_hvgs(expr: np.ndarray, fraction: float) -> np.ndarray:
    """Indices of the top ``ceil(fraction * n_genes)`` most variable genes.

    Sample variance uses the unbiased (n-1) estimator on raw values. The
    result is ordered by descending variance, ties broken by ascending index.
    """
    expr = np.asarray(expr, dtype=np.float64)
    if expr.ndim != 2 or expr.shape[0] < 2:
        raise ValueError("expression matrix must be (cases >= 2) x genes")
    if not 0 < fraction <= 1:
        raise ValueError(f"fraction must lie in (0, 1], got {fraction!r}")
    n_genes = expr.shape[1]
    count = math.ceil(fraction * n_genes)
    variances = expr.var(axis=0, ddof=1)
    order = np.lexsort((np.arange(n_genes), -variances))
    return order[:count]


def partition_genes(gene_ids: list[str], geneset_file: str | Path) -> GenePartition:
    """Split gene indices by the TUMOR/TME labels in a geneset file.

    Genes absent from the file are dropped and counted in ``n_unlisted``.
    Re-listing a gene with the same label is tolerated; conflicting labels
    are an error.
    """
    labels: dict[str, str] = {}
    with open(geneset_file, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.rstrip("\n")
            if not line.strip() or line.lstrip().startswith("#"):
                continue
            parts = line.split("\t")
            if len(parts) != 2 or not parts[0] or not parts[1]:
                raise GenesetError(f"line {lineno}: expected 'gene_id<TAB>label', got {line!r}")
            gid, label = parts
            if label not in ("TUMOR", "TME"):
                raise GenesetError(f"line {lineno}: unknown label {label!r}")
            if gid in labels and labels[gid] != label:
                raise GenesetError(f"gene {gid!r} listed with conflicting labels")
            labels[gid] = label

    tumor, tme = [], []
    n_unlisted = 0
    for idx, gid in enumerate(gene_ids):
        label = labels.get(gid)
        if label == "TUMOR":
            tumor.append(idx)
        elif label == "TME":
            tme.append(idx)
        else:
            n_unlisted += 1
    return GenePartition(
        tumor_idx=np.asarray(tumor, dtype=np.int64),
        tme_idx=np.asarray(tme, dtype=np.int64),
        n_unlisted=n_unlisted,
    )


def sample_patches(grid: SlideGrid, n: int, seed: int) -> SlideGrid:
    """Resample a grid to exactly ``n`` patch tokens.

    With at least ``n`` source patches this is a uniform sample without
    replacement. With fewer, every patch is repeated ``n // size`` times and
    the remainder drawn without replacement, so coverage of the source is
    guaranteed. The output is the smallest near-square grid holding ``n``
    slots; surplus slots are flagged invalid.
    """
    if n < 1:
        raise ValueError("sample size must be >= 1")
    size = grid.n_patches
    if size == 0:
        raise ValueError("grid is empty")
    rng = np.random.Generator(np.random.PCG64(seed))
    if n <= size:
        chosen = rng.choice(size, size=n, replace=False)
    else:
        reps = n // size
        remainder = rng.choice(size, size=n % size, replace=False)
        chosen = np.concatenate([np.tile(np.arange(size), reps), remainder])
        rng.shuffle(chosen)

    h_out = int(math.floor(math.sqrt(n)))
    w_out = int(math.ceil(n / h_out))
    slots = h_out * w_out

    tokens = grid.tokens()
    flat_coords = grid.coords.reshape(size, 2)
    flat_valid = grid.valid.reshape(size)

    data = np.zeros((slots, tokens.shape[1]), dtype=np.float32)
    coords = np.full((slots, 2), -1, dtype=np.int32)
    valid = np.zeros(slots, dtype=bool)
    data[:n] = tokens[chosen]
    coords[:n] = flat_coords[chosen]
    valid[:n] = flat_valid[chosen]
    return SlideGrid(
        data=data.reshape(h_out, w_out, -1),
        coords=coords.reshape(h_out, w_out, 2),
        valid=valid.reshape(h_out, w_out),
    )
