"""Static parameter / FLOPs accounting and receptive-field reports.

Everything here walks :func:`dcrnet.model.enumerate_layers`; no forward pass
is run.

FLOPs conventions:

* ``mac1``: one multiply-accumulate counts as one FLOP (conv, FC).
* ``mac2``: one multiply-accumulate counts as two FLOPs.

With ``elementwise=True`` (the default) batch norm adds 2 FLOPs per element
(scale and shift), PReLU and the residual add 1 per element, independent of
the MAC convention; this matches what common layer profilers report.
"""

import csv
import io
from dataclasses import dataclass, field, replace

from .errors import ConfigError
from .model import DcrNetConfig, build, enumerate_layers

CONVENTIONS = ("mac1", "mac2")
CSV_COLUMNS = ("layer", "kind", "params", "flops", "k_eff_h", "k_eff_w", "rf_h", "rf_w")
BN_FLOPS_PER_ELEMENT = 2
ACT_FLOPS_PER_ELEMENT = 1
ADD_FLOPS_PER_ELEMENT = 1


def _check_convention(convention):
    if convention not in CONVENTIONS:
        raise ConfigError(f"unknown FLOPs convention {convention!r}; use one of {CONVENTIONS}")


def layer_params(row):
    if row.kind == "conv":
        return row.spec.num_params
    if row.kind == "fc":
        return row.out_features * row.in_features + row.out_features
    if row.kind == "bn":
        return 2 * row.channels
    if row.kind == "prelu":
        return 1
    return 0


def layer_macs(row, hw):
    """Multiply-accumulates of a conv / FC layer (0 for other kinds)."""
    if row.kind == "conv":
        ho, wo = row.spec.output_hw(*hw)
        return row.spec.num_params * ho * wo
    if row.kind == "fc":
        return row.out_features * row.in_features
    return 0


def layer_flops(row, hw, convention="mac1", elementwise=True):
    _check_convention(convention)
    macs = layer_macs(row, hw)
    if macs:
        return macs * (1 if convention == "mac1" else 2)
    if not elementwise:
        return 0
    per = {"bn": BN_FLOPS_PER_ELEMENT, "prelu": ACT_FLOPS_PER_ELEMENT,
           "add": ADD_FLOPS_PER_ELEMENT}.get(row.kind, 0)
    return per * row.channels * hw[0] * hw[1]


@dataclass(frozen=True)
class LayerCost:
    name: str
    kind: str
    params: int
    flops: int
    k_eff: tuple = None
    rf: tuple = None


@dataclass
class ComplexityReport:
    rows: list = field(default_factory=list)
    convention: str = "mac1"
    elementwise: bool = True
    input_hw: tuple = (32, 32)

    @property
    def total_params(self):
        return sum(r.params for r in self.rows)

    @property
    def params_without_bn(self):
        """Conv + FC weights only (BN affine and PReLU slopes excluded)."""
        return sum(r.params for r in self.rows if r.kind in ("conv", "fc"))

    @property
    def bn_prelu_params(self):
        return self.total_params - self.params_without_bn

    @property
    def total_flops(self):
        return sum(r.flops for r in self.rows)

    def subtotal(self, kind):
        return sum(r.flops for r in self.rows if r.kind == kind)

    def to_csv(self):
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(CSV_COLUMNS)
        for r in self.rows:
            kh, kw = r.k_eff if r.k_eff else ("", "")
            rh, rw = r.rf if r.rf else ("", "")
            w.writerow([r.name, r.kind, r.params, r.flops, kh, kw, rh, rw])
        return buf.getvalue()


def _rf_rows(rows, hw):
    """Cumulative receptive field after each layer.

    Values are in the encoder input for the encoder and in the reshaped FC
    output for the decoder. Parallel branches start from the block input and
    are merged with a max at the fusion conv; FC layers see the whole map.
    """
    out = {}
    rf = (1, 1)
    block_in = None
    branch_end = {}
    current_stage = None
    for row in rows:
        if row.stage != current_stage:
            current_stage = row.stage
            block_in = rf
            branch_end = {}
        if row.kind == "fc":
            rf = (1, 1) if row.name.startswith("decoder") else hw
            out[row.name] = hw
            block_in = rf
            continue
        if row.branch is not None and row.branch != "fuse" and row.kind == "conv":
            start = branch_end.get(row.branch, block_in)
            kh, kw = row.spec.effective_kernel
            branch_end[row.branch] = (start[0] + kh - 1, start[1] + kw - 1)
            rf_row = branch_end[row.branch]
        elif row.branch == "fuse" and row.kind == "conv":
            merged = (max(e[0] for e in branch_end.values()),
                      max(e[1] for e in branch_end.values()))
            kh, kw = row.spec.effective_kernel
            rf = (merged[0] + kh - 1, merged[1] + kw - 1)
            rf_row = rf
        elif row.kind == "add":
            rf = (max(rf[0], block_in[0]), max(rf[1], block_in[1]))
            rf_row = rf
        elif row.kind == "conv":
            kh, kw = row.spec.effective_kernel
            rf = (rf[0] + kh - 1, rf[1] + kw - 1)
            rf_row = rf
        else:
            rf_row = branch_end.get(row.branch, rf) if row.branch not in (None, "fuse") else rf
        out[row.name] = rf_row
    return out


def analyze(model, convention="mac1", elementwise=True):
    """Per-layer parameters, FLOPs and receptive field for a built model."""
    _check_convention(convention)
    c = model.config
    hw = (c.na, c.nt)
    rows = enumerate_layers(model)
    rfs = _rf_rows(rows, hw)
    report = ComplexityReport(convention=convention, elementwise=elementwise, input_hw=hw)
    for row in rows:
        k_eff = row.spec.effective_kernel if row.kind == "conv" else None
        report.rows.append(LayerCost(row.name, row.kind, layer_params(row),
                                     layer_flops(row, hw, convention, elementwise),
                                     k_eff, rfs.get(row.name)))
    return report


def count_params(model):
    """``(rows, total, total_without_bn_prelu)`` with rows of (name, kind, params)."""
    rep = analyze(model)
    return ([(r.name, r.kind, r.params) for r in rep.rows], rep.total_params,
            rep.params_without_bn)


def count_flops(model, convention="mac1", elementwise=True):
    """``(rows, total)`` with rows of (name, kind, flops)."""
    rep = analyze(model, convention, elementwise)
    return [(r.name, r.kind, r.flops) for r in rep.rows], rep.total_flops


def rf_report(model):
    """Rows of (name, kind, effective kernel, cumulative RF) for conv layers."""
    return [(r.name, r.kind, r.k_eff, r.rf) for r in analyze(model).rows if r.kind == "conv"]


def analyze_config(config, convention="mac1", elementwise=True):
    return analyze(build(config, 0), convention, elementwise)


@dataclass(frozen=True)
class SweepRow:
    rho: int
    eta: object
    params: int
    flops_mac1: int
    flops_mac2: int
    nmse_db: float = None


def sweep(rhos, base=None, elementwise=True, nmse=None):
    """FLOPs and parameters per width expansion rate (optionally with NMSE).

    ``nmse`` maps ``(rho, eta)`` to a measured NMSE in dB.
    """
    base = base or DcrNetConfig()
    nmse = nmse or {}
    out = []
    for rho in rhos:
        cfg = replace(base, rho=int(rho))
        model = build(cfg, 0)
        r1 = analyze(model, "mac1", elementwise)
        r2 = analyze(model, "mac2", elementwise)
        out.append(SweepRow(cfg.rho, cfg.eta, r1.total_params, r1.total_flops, r2.total_flops,
                            nmse.get((cfg.rho, cfg.eta))))
    return out


def sweep_csv(rows):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(("rho", "eta", "params", "flops_mac1", "flops_mac2", "nmse_db"))
    for r in rows:
        w.writerow([r.rho, str(r.eta), r.params, r.flops_mac1, r.flops_mac2,
                    "" if r.nmse_db is None else repr(r.nmse_db)])
    return buf.getvalue()
