"""Result tables: long-form TSV plus wide, aligned text pivots."""

from __future__ import annotations

from dataclasses import dataclass, field


@dataclass(frozen=True)
class ResultRow:
    variant: str
    backbone: str
    detector: str
    masking: bool
    mask_ratio: int | None
    accuracy: float
    n: int

    def __post_init__(self):
        if not 0.0 <= self.accuracy <= 1.0:
            raise ValueError(f"accuracy outside [0, 1]: {self.accuracy}")
        if self.n < 1:
            raise ValueError("a result row needs n > 0")


TSV_COLUMNS = ("variant", "backbone", "detector", "masking", "mask_ratio", "accuracy", "n")


@dataclass
class ResultsTable:
    rows: list[ResultRow] = field(default_factory=list)
    notes: dict = field(default_factory=dict)

    def __len__(self):
        return len(self.rows)

    def select(self, **criteria) -> list[ResultRow]:
        return [r for r in self.rows if all(getattr(r, k) == v for k, v in criteria.items())]

    def variants(self) -> list[str]:
        return list(dict.fromkeys(r.variant for r in self.rows))

    def to_tsv(self) -> str:
        lines = ["\t".join(TSV_COLUMNS)]
        for r in self.rows:
            lines.append("\t".join([
                r.variant, r.backbone, r.detector, "on" if r.masking else "off",
                "-" if r.mask_ratio is None else str(r.mask_ratio),
                f"{r.accuracy:.6f}", str(r.n),
            ]))
        return "\n".join(lines) + "\n"

    def render_text(self) -> str:
        header = list(TSV_COLUMNS)
        body = [line.split("\t") for line in self.to_tsv().splitlines()[1:]]
        return render_aligned(header, body)


def render_aligned(header, body) -> str:
    widths = [max(len(str(c)) for c in col) for col in zip(header, *body)]
    fmt = "  ".join(f"{{:<{w}}}" for w in widths)
    out = [fmt.format(*header), "  ".join("-" * w for w in widths)]
    out.extend(fmt.format(*row) for row in body)
    return "\n".join(line.rstrip() for line in out) + "\n"


def _pct(acc: float) -> str:
    return f"{100.0 * acc:.2f}"


def pivot_mask_ratio(table: ResultsTable, ratios) -> tuple[list[str], list[list[str]]]:
    """Rows are dataset variants, one column per mask ratio."""
    header = ["variant"] + [f"{r} %" for r in ratios]
    body = []
    for v in table.variants():
        cells = [v]
        for r in ratios:
            (row,) = table.select(variant=v, masking=True, mask_ratio=r)
            cells.append(_pct(row.accuracy))
        body.append(cells)
    return header, body


def pivot_backbone(table: ResultsTable, backbones) -> tuple[list[str], list[list[str]]]:
    """Rows are backbones; each variant has a with- and a without-masking column."""
    variants = table.variants()
    header = ["backbone"]
    for v in variants:
        header += [f"{v} w/ masking", f"{v} w/o masking"]
    body = []
    for b in backbones:
        cells = [b]
        for v in variants:
            (on,) = table.select(variant=v, backbone=b, masking=True)
            (off,) = table.select(variant=v, backbone=b, masking=False)
            cells += [_pct(on.accuracy), _pct(off.accuracy)]
        body.append(cells)
    return header, body


def pivot_detector(table: ResultsTable, detectors) -> tuple[list[str], list[list[str]]]:
    """Rows are detection sources, one column per variant."""
    variants = table.variants()
    header = ["detector"] + variants
    body = []
    for d in detectors:
        cells = [d]
        for v in variants:
            (row,) = table.select(variant=v, detector=d, masking=True)
            cells.append(_pct(row.accuracy))
        body.append(cells)
    return header, body
