"""Evaluation and ablation reports: an RST table for people, sorted JSON for machines.

Reports never carry timings so that reruns are byte-identical.
"""
from dataclasses import asdict, dataclass, field

import tablib

from .exceptions import ContractError
from .storage import write_json, write_text

REPORT_SCHEMA = 1


@dataclass(frozen=True)
class EvalReport:
    name: str
    images: int
    accuracy: float
    agreement: float
    mean_abs_logit_deviation: float
    size_bits: int
    baseline_size_bits: int
    bits: dict = field(default_factory=dict)
    provenance: dict = field(default_factory=dict)

    def __post_init__(self):
        for name in ("accuracy", "agreement"):
            value = getattr(self, name)
            if not 0.0 <= value <= 1.0:
                raise ContractError(f"{name} must lie in [0, 1]", **{name: value})

    @property
    def within_budget(self):
        return self.size_bits <= self.baseline_size_bits

    def to_dict(self):
        return {**asdict(self), "within_budget": self.within_budget}

    def row(self):
        return (
            self.name,
            f"{100 * self.accuracy:.2f}",
            f"{100 * self.agreement:.2f}",
            f"{self.mean_abs_logit_deviation:.6f}",
            self.size_bits,
            "yes" if self.within_budget else "no",
        )


ROW_HEADERS = ["configuration", "top-1 (%)", "agreement (%)", "mean |dlogit|", "size (bits)", "within budget"]


def report_table(reports, title):
    data = tablib.Dataset(headers=ROW_HEADERS, title=title)
    for report in reports:
        data.append(report.row())
    return data


def bit_table(report):
    data = tablib.Dataset(headers=["layer", "bits (w/a)"], title="bits")
    for layer, bits in report.bits.items():
        data.append((layer, bits))
    return data


def write_eval_report(directory, stem, report):
    text = f"{report.name}\n{'=' * len(report.name)}\n\n"
    text += report_table([report], report.name).export("rst") + "\n\n"
    if report.bits:
        text += bit_table(report).export("rst") + "\n"
    write_text(directory / f"{stem}.rst", text)
    write_json(directory / f"{stem}.json", {"schema": REPORT_SCHEMA, "report": report.to_dict()})


@dataclass(frozen=True)
class AblationReport:
    quantizer_rows: list
    allocation_rows: list
    checks: dict
    provenance: dict

    def to_dict(self):
        return {
            "schema": REPORT_SCHEMA,
            "quantizer_modes": [report.to_dict() for report in self.quantizer_rows],
            "allocation_presets": [report.to_dict() for report in self.allocation_rows],
            "checks": self.checks,
            "provenance": self.provenance,
        }

    def to_rst(self):
        sections = [
            ("LayerNorm activation quantizers", self.quantizer_rows),
            ("Bit allocation", self.allocation_rows),
        ]
        text = ""
        for title, rows in sections:
            text += f"{title}\n{'=' * len(title)}\n\n{report_table(rows, title).export('rst')}\n\n"
        checks = tablib.Dataset(headers=["check", "holds"], title="checks")
        for name, holds in self.checks.items():
            checks.append((name, "yes" if holds else "no"))
        text += f"Directional checks\n{'=' * 18}\n\n{checks.export('rst')}\n"
        return text

    def write(self, directory):
        write_text(directory / "ablation.rst", self.to_rst())
        write_json(directory / "ablation.json", self.to_dict())
