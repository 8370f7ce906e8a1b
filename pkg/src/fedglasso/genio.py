"""Genotype ingestion: a minimal VCF-subset reader/writer, additive SNP coding
and the MAF / GQ quality-control filters."""
from __future__ import annotations

import gzip
import io
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import NamedTuple

import numpy as np

from .data import GroupedDesign, GroupPartition, fixed_width_sizes, make_partition

log = logging.getLogger(__name__)

MISSING = -1
GT_CODES = {"0/0": 0, "0/1": 1, "1/0": 1, "1/1": 2, "./.": MISSING}
FIXED_COLUMNS = ("#CHROM", "POS", "ID", "REF", "ALT", "QUAL", "FILTER", "INFO", "FORMAT")


class GenotypeParseError(ValueError):
    def __init__(self, line_no, msg):
        super().__init__(f"line {line_no}: {msg}")
        self.line_no = line_no


class SnpRecord(NamedTuple):
    chrom: str
    pos: int
    rs_id: str


@dataclass
class GenotypeMatrix:
    """Coded genotypes, samples x SNPs.

    ``calls`` holds ALT-allele counts 0/1/2 or :data:`MISSING`; ``gq`` the
    per-call genotype quality.
    """

    samples: list
    snps: list
    calls: np.ndarray
    gq: np.ndarray

    def __post_init__(self):
        self.calls = np.asarray(self.calls, dtype=np.int8)
        self.gq = np.asarray(self.gq, dtype=np.int32)
        self.snps = [SnpRecord(*s) for s in self.snps]
        self.samples = list(self.samples)
        shape = (len(self.samples), len(self.snps))
        if self.calls.shape != shape or self.gq.shape != shape:
            raise ValueError(f"calls/gq shape must be {shape}")
        if not np.isin(self.calls, (0, 1, 2, MISSING)).all():
            raise ValueError("genotype codes must be 0, 1, 2 or MISSING")

    @property
    def shape(self):
        return self.calls.shape

    @property
    def rs_ids(self) -> list:
        return [s.rs_id for s in self.snps]

    def take_snps(self, idx) -> GenotypeMatrix:
        idx = np.asarray(idx, dtype=np.int64)
        return GenotypeMatrix(self.samples, [self.snps[j] for j in idx], self.calls[:, idx], self.gq[:, idx])

    def __eq__(self, other):
        if not isinstance(other, GenotypeMatrix):
            return NotImplemented
        return (self.samples == other.samples and self.snps == other.snps
                and np.array_equal(self.calls, other.calls) and np.array_equal(self.gq, other.gq))


def _parse_call(tok, gt_i, gq_i, line_no):
    parts = tok.split(":")
    if len(parts) <= max(gt_i, gq_i):
        raise GenotypeParseError(line_no, f"call {tok!r} has fewer fields than FORMAT")
    gt = parts[gt_i]
    if gt not in GT_CODES:
        raise GenotypeParseError(line_no, f"unknown GT token {gt!r}")
    gq = parts[gq_i]
    if gq == ".":
        q = 0
    else:
        try:
            q = int(gq)
        except ValueError:
            raise GenotypeParseError(line_no, f"bad GQ value {gq!r}") from None
    return GT_CODES[gt], q


def parse_genotype_table(stream) -> GenotypeMatrix:
    """Parse the VCF subset from a text stream.

    Records need CHROM POS ID REF ALT QUAL FILTER INFO FORMAT and one column
    per sample; FORMAT must list GT and GQ.  Multi-allelic ALT is rejected.
    A missing GQ (``.``) is read as 0.
    """
    samples = None
    snps, calls, gqs = [], [], []
    for line_no, raw in enumerate(stream, 1):
        line = raw.rstrip("\r\n")
        if not line:
            continue
        if line.startswith("##"):
            continue
        if line.startswith("#"):
            cols = line.split("\t")
            if tuple(cols[:9]) != FIXED_COLUMNS:
                raise GenotypeParseError(line_no, "header must start with " + " ".join(FIXED_COLUMNS))
            samples = cols[9:]
            continue
        cols = line.split("\t")
        if samples is None:
            raise GenotypeParseError(line_no, "record before the #CHROM header line")
        if len(cols) != 9 + len(samples):
            raise GenotypeParseError(line_no, f"expected {9 + len(samples)} columns, got {len(cols)}")
        if "," in cols[4]:
            raise GenotypeParseError(line_no, f"multi-allelic record {cols[2]!r} not supported")
        fmt = cols[8].split(":")
        if "GT" not in fmt or "GQ" not in fmt:
            raise GenotypeParseError(line_no, "FORMAT must contain GT and GQ")
        gt_i, gq_i = fmt.index("GT"), fmt.index("GQ")
        try:
            pos = int(cols[1])
        except ValueError:
            raise GenotypeParseError(line_no, f"bad POS {cols[1]!r}") from None
        row = [_parse_call(t, gt_i, gq_i, line_no) for t in cols[9:]]
        snps.append(SnpRecord(cols[0], pos, cols[2]))
        calls.append([c for c, _ in row])
        gqs.append([q for _, q in row])
    if samples is None:
        raise GenotypeParseError(0, "no #CHROM header line")
    n = len(samples)
    calls = np.array(calls, dtype=np.int8).reshape(-1, n).T
    gqs = np.array(gqs, dtype=np.int32).reshape(-1, n).T
    return GenotypeMatrix(samples, snps, calls, gqs)


def open_text(path):
    """Open a possibly gzip-compressed text file."""
    with open(path, "rb") as fh:
        magic = fh.read(2)
    if magic == b"\x1f\x8b":
        return gzip.open(path, "rt", encoding="utf-8")
    return open(path, encoding="utf-8")


def read_genotype_file(path) -> GenotypeMatrix:
    with open_text(path) as fh:
        return parse_genotype_table(fh)


_GT_TOKENS = {0: "0/0", 1: "0/1", 2: "1/1", MISSING: "./."}


def emit_genotype_table(g: GenotypeMatrix, stream):
    stream.write("##fileformat=VCFv4.2\n")
    stream.write('##FORMAT=<ID=GT,Number=1,Type=String,Description="Genotype">\n')
    stream.write('##FORMAT=<ID=GQ,Number=1,Type=Integer,Description="Genotype Quality">\n')
    stream.write("\t".join(FIXED_COLUMNS + tuple(g.samples)) + "\n")
    for j, snp in enumerate(g.snps):
        calls = "\t".join(f"{_GT_TOKENS[int(c)]}:{int(q)}" for c, q in zip(g.calls[:, j], g.gq[:, j]))
        stream.write(f"{snp.chrom}\t{snp.pos}\t{snp.rs_id}\tA\tG\t.\tPASS\t.\tGT:GQ\t{calls}\n")


def write_genotype_file(g: GenotypeMatrix, path):
    opener = gzip.open if str(path).endswith(".gz") else open
    with opener(path, "wt", encoding="utf-8") as fh:
        emit_genotype_table(g, fh)


def maf(codes) -> float:
    """Folded minor allele frequency over the non-missing calls."""
    codes = np.asarray(codes)
    ok = codes != MISSING
    n = int(ok.sum())
    if n == 0:
        raise ValueError("maf of an all-missing column")
    f = float(codes[ok].sum()) / (2 * n)
    return min(f, 1.0 - f)


@dataclass
class QcReport:
    maf_min: float
    gq_min: int
    masked_calls: int = 0
    dropped: list = field(default_factory=list)   # {"rs_id", "index", "reason", "maf"}
    imputed: dict = field(default_factory=dict)   # rs_id -> count

    def to_json(self) -> dict:
        return {"maf_min": self.maf_min, "gq_min": self.gq_min, "masked_calls": self.masked_calls,
                "dropped": self.dropped, "imputed": self.imputed}

    def save(self, path):
        Path(path).write_text(json.dumps(self.to_json(), indent=2))


@dataclass
class QcResult:
    genotypes: GenotypeMatrix
    values: np.ndarray
    report: QcReport


def qc_filter(g: GenotypeMatrix, maf_min=0.05, gq_min=45) -> QcResult:
    """Mask low-GQ calls, drop low-MAF (or emptied) SNPs, mean-impute the rest.

    ``genotypes`` keeps the surviving SNPs with masked calls set to
    :data:`MISSING`; ``values`` is the real-valued imputed matrix.
    """
    report = QcReport(maf_min, gq_min)
    calls = g.calls.copy()
    low = (g.gq < gq_min) & (calls != MISSING)
    report.masked_calls = int(low.sum())
    calls[low] = MISSING
    keep = []
    for j, snp in enumerate(g.snps):
        col = calls[:, j]
        if np.all(col == MISSING):
            report.dropped.append({"rs_id": snp.rs_id, "index": j, "reason": "all calls missing", "maf": None})
            continue
        m = maf(col)
        if m < maf_min:
            report.dropped.append({"rs_id": snp.rs_id, "index": j, "reason": f"maf<{maf_min}", "maf": m})
            continue
        keep.append(j)
    kept = GenotypeMatrix(g.samples, [g.snps[j] for j in keep], calls[:, keep], g.gq[:, keep])
    values = kept.calls.astype(np.float64)
    for j, snp in enumerate(kept.snps):
        miss = kept.calls[:, j] == MISSING
        if miss.any():
            values[miss, j] = values[~miss, j].mean()
            report.imputed[snp.rs_id] = int(miss.sum())
    if report.dropped:
        log.info("qc dropped %d of %d SNPs", len(report.dropped), len(g.snps))
    return QcResult(kept, values, report)


def to_design(qc: QcResult, response, group_size=20, weight_rule="sqrt_size") -> tuple[GroupedDesign, GroupPartition]:
    """Fixed-width groups of consecutive SNPs (the last one may be short)."""
    response = np.asarray(response, dtype=np.float64)
    if response.shape != (qc.values.shape[0],):
        raise ValueError(f"response has {response.shape[0]} entries, expected {qc.values.shape[0]}")
    if group_size < 1:
        raise ValueError("group_size must be >= 1")
    partition = make_partition(fixed_width_sizes(qc.values.shape[1], group_size), weight_rule)
    return GroupedDesign(qc.values, response), partition


def read_response(path, samples=None) -> np.ndarray:
    """Phenotype file: one value per line, or ``sample<TAB>value`` lines matched to ``samples``."""
    rows = [ln.split() for ln in Path(path).read_text().splitlines() if ln.strip() and not ln.startswith("#")]
    if rows and len(rows[0]) == 2:
        table = {r[0]: float(r[1]) for r in rows}
        if samples is None:
            return np.array([float(r[1]) for r in rows])
        missing = [s for s in samples if s not in table]
        if missing:
            raise ValueError(f"no phenotype for samples {missing[:5]}")
        return np.array([table[s] for s in samples])
    return np.array([float(r[0]) for r in rows])


def synthetic_genotypes(n_samples, n_snps, seed=0, low_maf=(), maf_range=(0.1, 0.5), low_gq_rate=0.0):
    """Random bi-allelic genotypes under Hardy-Weinberg proportions.

    Columns listed in ``low_maf`` are made monomorphic, so their MAF is 0
    regardless of sample size.
    """
    rng = np.random.default_rng(seed)
    freqs = rng.uniform(*maf_range, size=n_snps)
    calls = rng.binomial(2, freqs, size=(n_samples, n_snps)).astype(np.int8)
    low_maf = np.asarray(sorted(set(int(j) for j in low_maf)), dtype=np.int64)
    calls[:, low_maf] = 0
    gq = rng.integers(45, 100, size=(n_samples, n_snps), dtype=np.int32)
    if low_gq_rate > 0:
        bad = rng.random((n_samples, n_snps)) < low_gq_rate
        gq[bad] = rng.integers(0, 45, size=int(bad.sum()))
    samples = [f"S{i:04d}" for i in range(n_samples)]
    snps = [SnpRecord("1", 1000 + 100 * j, f"rs{100000 + j}") for j in range(n_snps)]
    return GenotypeMatrix(samples, snps, calls, gq)


def write_synthetic_vcf(path, n_samples, n_snps, seed=0, active_snps=5, snr=10.0, low_maf=()):
    """Write a synthetic VCF plus a phenotype file ``path + '.pheno'``.

    The phenotype is linear in ``active_snps`` random SNP codes plus noise at
    the given signal-to-noise ratio.  Returns (genotypes, response).
    """
    g = synthetic_genotypes(n_samples, n_snps, seed, low_maf)
    rng = np.random.default_rng(seed + 1)
    cand = np.setdiff1d(np.arange(n_snps), np.asarray(low_maf, dtype=np.int64))
    active = rng.choice(cand, size=min(active_snps, cand.size), replace=False)
    signal = g.calls[:, active].astype(float) @ rng.standard_normal(active.size)
    noise = rng.standard_normal(n_samples)
    if np.isfinite(snr) and signal.var() > 0:
        noise *= np.sqrt(signal.var() / (snr * noise.var()))
        y = signal + noise
    else:
        y = signal
    write_genotype_file(g, path)
    with open(str(path) + ".pheno", "w") as fh:
        fh.writelines(f"{s}\t{float(v)!r}\n" for s, v in zip(g.samples, y))
    return g, y


def genotype_text(g: GenotypeMatrix) -> str:
    buf = io.StringIO()
    emit_genotype_table(g, buf)
    return buf.getvalue()
