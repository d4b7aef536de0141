"""FLOPs and model-size accounting derived from a model description.

Convention: one multiply-accumulate counts as one FLOP, every bias addition
counts as one FLOP, batch norm and ReLU are free.
"""

from __future__ import annotations

from dataclasses import dataclass, field

BYTES_PER_PARAM = 4


@dataclass
class LayerCost:
    name: str
    kind: str
    output_dims: tuple
    macs: int
    bias_adds: int

    @property
    def flops(self) -> int:
        return self.macs + self.bias_adds


@dataclass
class FlopsReport:
    layers: list = field(default_factory=list)

    @property
    def total_macs(self) -> int:
        return sum(l.macs for l in self.layers)

    @property
    def total_bias_adds(self) -> int:
        return sum(l.bias_adds for l in self.layers)

    @property
    def total(self) -> int:
        return sum(l.flops for l in self.layers)

    @property
    def gflops(self) -> float:
        return self.total / 1e9

    def format(self) -> str:
        rows = [f"{'layer':<14} {'kind':<7} {'output':<22} {'MFLOPs':>12}"]
        for l in self.layers:
            dims = "x".join(str(d) for d in l.output_dims)
            rows.append(f"{l.name:<14} {l.kind:<7} {dims:<22} {l.flops / 1e6:>12.3f}")
        rows.append(f"total: {self.gflops:.2f} GFLOPs "
                    f"({self.total_macs} MACs + {self.total_bias_adds} bias adds)")
        return "\n".join(rows)


def count_flops(model, input_dims) -> FlopsReport:
    """Per-layer cost of one forward pass at ``input_dims`` = (N, C, H, W)."""
    dims = model.infer_shapes(tuple(input_dims))
    n = input_dims[0]
    report = FlopsReport()
    for layer in model.layers:
        out = dims[layer.name]
        macs, bias = layer.cost(out[2:])
        report.layers.append(LayerCost(layer.name, layer.kind, out, n * macs, n * bias))
    return report


def count_param_elements(model) -> int:
    total = 0
    for shape in model.param_shapes().values():
        k = 1
        for d in shape:
            k *= d
        total += k
    return total


def count_params(model) -> int:
    """Model size in bytes (float32, batch-norm statistics included)."""
    return BYTES_PER_PARAM * count_param_elements(model)
