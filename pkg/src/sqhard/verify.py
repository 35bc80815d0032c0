"""Re-derive every invariant of an instance file from its breakpoints alone."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .io import SCHEMA_VERSION, InstanceFile
from .piecewise import best_halfspace, conditional, moments, relu_correlation

MOMENT_TOL = 1e-8
MASS_TOL = 1e-8
CHI_TOL = 1e-7
REPORT_TOL = 1e-12


@dataclass(frozen=True)
class Row:
    name: str
    anchor: str
    value: float
    tolerance: str
    passed: bool

    def to_dict(self) -> dict:
        return {"name": self.name, "anchor": self.anchor, "value": self.value,
                "tolerance": self.tolerance, "pass": self.passed}


@dataclass(frozen=True)
class VerificationReport:
    task: str
    k: int
    rows: tuple[Row, ...]

    @property
    def passed(self) -> bool:
        return all(r.passed for r in self.rows)

    def failures(self) -> list[Row]:
        return [r for r in self.rows if not r.passed]

    def to_dict(self) -> dict:
        return {"schema_version": SCHEMA_VERSION, "task": self.task, "k": self.k,
                "rows": [r.to_dict() for r in self.rows], "pass": self.passed}

    def render(self) -> str:
        width = max(len(r.name) for r in self.rows)
        lines = [f"{'PASS' if r.passed else 'FAIL'}  {r.name:<{width}}  {r.value:.6g}  ({r.tolerance})"
                 for r in self.rows]
        lines.append(f"overall: {'PASS' if self.passed else 'FAIL'}")
        return "\n".join(lines)


def verify_instance(doc: InstanceFile) -> VerificationReport:
    f, k = doc.f, doc.k
    rows = []
    ltf = doc.task == "ltf"
    top = k - 1 if ltf else k  # highest moment that must vanish
    cap = k + 1 if ltf else 2 * k + 6
    rows.append(Row("piece count", "piecewise-constant structure", float(f.piece_count), f"<= {cap}",
                    f.piece_count <= cap))
    m = moments(f, max(top, 0) + 1)
    anchor = "vanishing low-degree moments"
    for t in range(top + 1):
        rows.append(Row(f"moment t={t}", anchor, float(m[t]), f"|value| <= {MOMENT_TOL:g}",
                        abs(m[t]) <= MOMENT_TOL))
    stored = np.asarray(doc.moment_report.moments)
    n = min(stored.size, m.size)
    diff = float(np.max(np.abs(stored[:n] - m[:n]))) if n else 0.0
    rows.append(Row("stored moment report", "recomputable from breakpoints", diff,
                    f"<= {REPORT_TOL:g}", diff <= REPORT_TOL))
    rc = relu_correlation(f)
    if ltf:
        beta, corr, _ = best_halfspace(f)
        rows.append(Row("best halfspace correlation", "a halfspace correlates with f", corr,
                        f">= 1/(2k) = {1 / (2 * k):.6g}", corr >= 1 / (2 * k) - 1e-9))
        plus = conditional(f, 1)
        rows.append(Row("Pr[f = +1]", "balanced labels", plus.normalizer, f"1/2 +- {MASS_TOL:g}",
                        abs(plus.normalizer - 0.5) <= MASS_TOL))
        for label in (1, -1):
            cd = conditional(f, label)
            chi = cd.chi_square_plus_one
            rows.append(Row(f"int A^2/phi (label {label:+d})", "conditional chi-square", chi,
                            f"2 +- {CHI_TOL:g}", abs(chi - 2.0) <= CHI_TOL))
        scale_ok = doc.scale_C == 1.0
        rows.append(Row("scale_C", "ltf labels are +-1", doc.scale_C, "== 1", scale_ok))
    else:
        rows.append(Row("relu correlation", "E[f ReLU] > 0", rc, "> 0", rc > 0))
        rel = abs(rc - doc.relu_corr) / max(abs(rc), 1e-300)
        rows.append(Row("stored relu_corr", "recomputable from breakpoints", rel, f"relative <= {REPORT_TOL:g}",
                        rel <= REPORT_TOL))
        prod = doc.scale_C * doc.relu_corr
        rows.append(Row("scale_C * relu_corr", "||ReLU||^2 = 1/2", prod, "== 0.5", prod == 0.5))
    return VerificationReport(doc.task, k, tuple(rows))
