"""TinyissimoYOLO variant builders.

Backbones and necks follow the public YOLOv5-n / YOLOv8-n / YOLOv10-n layer
lists with the TinyissimoYOLO width/depth multiples applied. Channel counts
are rounded to the nearest multiple of 8 (never below 8). All variants
predict at two scales (stride 16 and stride 32) through a v8-style decoupled
head with direct ltrb box regression (4 channels) and ``num_classes`` logits.
"""

from __future__ import annotations

from dataclasses import dataclass

from .graph import ACTIVATIONS, GraphError, GraphSpec, LayerSpec


@dataclass(frozen=True)
class VariantConfig:
    width: float
    depth: float
    max_channels: int = 1024  # cap applied before the width multiple
    reg_hidden_min: int = 96  # floor on the box-branch hidden width


# The cap and box-branch floor are reconstruction knobs; together with the
# multiples they land each variant within a few percent of the published
# parameter counts. v1_3 ignores width/depth and uses _V13_WIDTHS.
VARIANTS: dict[tuple[str, str], VariantConfig] = {
    ("v1_3", "small"): VariantConfig(1.0, 1.0, reg_hidden_min=16),
    ("v1_3", "big"): VariantConfig(1.0, 1.0, reg_hidden_min=16),
    ("v5", "small"): VariantConfig(0.10, 0.33, max_channels=1024),
    ("v5", "big"): VariantConfig(0.15, 0.33, max_channels=512),
    ("v8", "small"): VariantConfig(0.10, 0.30, max_channels=1024),
    ("v8", "big"): VariantConfig(0.18, 0.30, max_channels=384),
    ("v10", "big"): VariantConfig(0.18, 0.15, max_channels=768),
}

# conv widths of the v1-style backbone: 3x3 convs, each followed by a 2x2 maxpool
# except the last, the last two feed the stride-16 and stride-32 heads
_V13_WIDTHS = {
    "small": (16, 32, 64, 64, 64, 128),
    "big": (16, 32, 64, 64, 128, 128),
}

SIZES = ("small", "big")


def round_channels(c: float) -> int:
    return max(8, int(round(c / 8.0)) * 8)


def _repeats(n: int, depth: float) -> int:
    return max(int(round(n * depth)), 1) if n > 1 else n


class _Builder:
    def __init__(self, act: str):
        self.act = act
        self.layers = [LayerSpec("input", "input", (), {"channels": 3}, "input", "input")]
        self.ch = {"input": 3}

    def _add(self, name, kind, inputs, params, block, block_kind, channels) -> str:
        self.layers.append(LayerSpec(name, kind, tuple(inputs), params, block, block_kind))
        self.ch[name] = channels
        return name

    def conv(self, src, c2, k, s=1, name="", block="", block_kind="conv", g=1, act=True, p=None):
        p = k // 2 if p is None else p
        params = {
            "in_channels": self.ch[src], "out_channels": c2, "kernel": (k, k),
            "stride": (s, s), "padding": (p, p), "groups": g,
            "act": self.act if act else None,
        }
        return self._add(name, "conv", [src], params, block, block_kind, c2)

    def maxpool(self, src, k, s, name, p=0, block="", block_kind="maxpool"):
        return self._add(name, "maxpool", [src], {"kernel": k, "stride": s, "padding": p},
                         block or name, block_kind, self.ch[src])

    def upsample(self, src, name, factor=2):
        return self._add(name, "upsample", [src], {"factor": factor}, name, "upsample", self.ch[src])

    def concat(self, srcs, name, block="", block_kind="concat"):
        return self._add(name, "concat", srcs, {}, block or name, block_kind,
                         sum(self.ch[s] for s in srcs))

    def slice(self, src, start, stop, name, block, block_kind):
        return self._add(name, "slice", [src], {"start": start, "stop": stop}, block, block_kind,
                         stop - start)

    def add(self, a, b, name, block, block_kind):
        return self._add(name, "add", [a, b], {}, block, block_kind, self.ch[a])

    # -- blocks ---------------------------------------------------------
    def plain_conv(self, src, c2, k, s, name, p=None):
        return self.conv(src, c2, k, s, name=name, block=name, block_kind="conv", p=p)

    def bottleneck(self, src, c, k1, k2, shortcut, prefix, block, bk):
        y = self.conv(src, c, k1, name=f"{prefix}.cv1", block=block, block_kind=bk)
        y = self.conv(y, c, k2, name=f"{prefix}.cv2", block=block, block_kind=bk)
        if shortcut and self.ch[src] == c:
            y = self.add(src, y, f"{prefix}.add", block, bk)
        return y

    def c3(self, src, c2, n, shortcut, name):
        bk, c_ = "c3_block", c2 // 2
        a = self.conv(src, c_, 1, name=f"{name}.cv1", block=name, block_kind=bk)
        b = self.conv(src, c_, 1, name=f"{name}.cv2", block=name, block_kind=bk)
        for i in range(n):
            a = self.bottleneck(a, c_, 1, 3, shortcut, f"{name}.m{i}", name, bk)
        y = self.concat([a, b], f"{name}.cat", block=name, block_kind=bk)
        return self.conv(y, c2, 1, name=f"{name}.cv3", block=name, block_kind=bk)

    def c2f(self, src, c2, n, shortcut, name, cib=False):
        bk = "c2fcib_block" if cib else "c2f_block"
        c = c2 // 2
        y = self.conv(src, 2 * c, 1, name=f"{name}.cv1", block=name, block_kind=bk)
        parts = [self.slice(y, 0, c, f"{name}.split0", name, bk),
                 self.slice(y, c, 2 * c, f"{name}.split1", name, bk)]
        for i in range(n):
            prefix = f"{name}.m{i}"
            if cib:
                parts.append(self.cib(parts[-1], c, shortcut, prefix, name, bk))
            else:
                parts.append(self.bottleneck(parts[-1], c, 3, 3, shortcut, prefix, name, bk))
        y = self.concat(parts, f"{name}.cat", block=name, block_kind=bk)
        return self.conv(y, c2, 1, name=f"{name}.cv2", block=name, block_kind=bk)

    def cib(self, src, c, shortcut, prefix, block, bk):
        # compact inverted block: dw3x3, pw 2c, dw3x3 (re-parameterised), pw c, dw3x3
        c1 = self.ch[src]
        y = self.conv(src, c1, 3, g=c1, name=f"{prefix}.dw1", block=block, block_kind=bk)
        y = self.conv(y, 2 * c, 1, name=f"{prefix}.pw1", block=block, block_kind=bk)
        y = self.conv(y, 2 * c, 3, g=2 * c, name=f"{prefix}.dw2", block=block, block_kind=bk)
        y = self.conv(y, c, 1, name=f"{prefix}.pw2", block=block, block_kind=bk)
        y = self.conv(y, c, 3, g=c, name=f"{prefix}.dw3", block=block, block_kind=bk)
        if shortcut and c1 == c:
            y = self.add(src, y, f"{prefix}.add", block, bk)
        return y

    def sppf(self, src, c2, name, k=5):
        bk, c_ = "sppf", self.ch[src] // 2
        y = [self.conv(src, c_, 1, name=f"{name}.cv1", block=name, block_kind=bk)]
        for i in range(3):
            y.append(self.maxpool(y[-1], k, 1, f"{name}.pool{i}", p=k // 2, block=name, block_kind=bk))
        cat = self.concat(y, f"{name}.cat", block=name, block_kind=bk)
        return self.conv(cat, c2, 1, name=f"{name}.cv2", block=name, block_kind=bk)

    def scdown(self, src, c2, name):
        bk = "scdown"
        y = self.conv(src, c2, 1, name=f"{name}.cv1", block=name, block_kind=bk)
        return self.conv(y, c2, 3, 2, g=c2, act=False, name=f"{name}.cv2", block=name, block_kind=bk)

    def detect(self, srcs, nc, reg_hidden_min, one_to_one=False) -> list[str]:
        bk = "detect_v10" if one_to_one else "detect_v8"
        ch0 = self.ch[srcs[0]]
        c2 = max(16, ch0 // 4, reg_hidden_min)
        c3 = max(ch0, min(nc, 100))
        outs = []
        for i, src in enumerate(srcs):
            blk = f"detect.{i}"
            b = self.conv(src, c2, 3, name=f"{blk}.box0", block=blk, block_kind=bk)
            b = self.conv(b, c2, 3, name=f"{blk}.box1", block=blk, block_kind=bk)
            b = self.conv(b, 4, 1, act=False, name=f"{blk}.box2", block=blk, block_kind=bk)
            c = src
            if one_to_one:
                cin = self.ch[src]
                c = self.conv(c, cin, 3, g=cin, name=f"{blk}.cls0dw", block=blk, block_kind=bk)
                c = self.conv(c, c3, 1, name=f"{blk}.cls0pw", block=blk, block_kind=bk)
                c = self.conv(c, c3, 3, g=c3, name=f"{blk}.cls1dw", block=blk, block_kind=bk)
                c = self.conv(c, c3, 1, name=f"{blk}.cls1pw", block=blk, block_kind=bk)
            else:
                c = self.conv(c, c3, 3, name=f"{blk}.cls0", block=blk, block_kind=bk)
                c = self.conv(c, c3, 3, name=f"{blk}.cls1", block=blk, block_kind=bk)
            c = self.conv(c, nc, 1, act=False, name=f"{blk}.cls2", block=blk, block_kind=bk)
            outs.append(self.concat([b, c], f"head{i}", block=blk, block_kind=bk))
        return outs


def _build_v13(b: _Builder, size: str) -> list[str]:
    widths = _V13_WIDTHS[size]
    x = "input"
    feats = []
    for i, c in enumerate(widths):
        x = b.plain_conv(x, c, 3, 1, f"b{i}")
        if i == len(widths) - 2:
            feats.append(x)  # stride 16
        if i < len(widths) - 1:
            x = b.maxpool(x, 2, 2, f"b{i}.pool")
    feats.append(x)  # stride 32
    return feats


def _build_v5(b: _Builder, cfg: VariantConfig) -> list[str]:
    ch = lambda c: round_channels(min(c, cfg.max_channels) * cfg.width)
    n = lambda r: _repeats(r, cfg.depth)
    x = b.plain_conv("input", ch(64), 6, 2, "b0", p=2)
    x = b.plain_conv(x, ch(128), 3, 2, "b1")
    x = b.c3(x, ch(128), n(3), True, "b2")
    x = b.plain_conv(x, ch(256), 3, 2, "b3")
    x = b.c3(x, ch(256), n(6), True, "b4")
    x = b.plain_conv(x, ch(512), 3, 2, "b5")
    p4 = b.c3(x, ch(512), n(9), True, "b6")
    x = b.plain_conv(p4, ch(1024), 3, 2, "b7")
    x = b.c3(x, ch(1024), n(3), True, "b8")
    x = b.sppf(x, ch(1024), "b9")
    p5 = b.plain_conv(x, ch(512), 1, 1, "n10")
    x = b.upsample(p5, "n11")
    x = b.concat([x, p4], "n12")
    h4 = b.c3(x, ch(512), n(3), False, "n13")
    x = b.plain_conv(h4, ch(512), 3, 2, "n14")
    x = b.concat([x, p5], "n15")
    h5 = b.c3(x, ch(1024), n(3), False, "n16")
    return [h4, h5]


def _build_v8(b: _Builder, cfg: VariantConfig) -> list[str]:
    ch = lambda c: round_channels(min(c, cfg.max_channels) * cfg.width)
    n = lambda r: _repeats(r, cfg.depth)
    x = b.plain_conv("input", ch(64), 3, 2, "b0")
    x = b.plain_conv(x, ch(128), 3, 2, "b1")
    x = b.c2f(x, ch(128), n(3), True, "b2")
    x = b.plain_conv(x, ch(256), 3, 2, "b3")
    x = b.c2f(x, ch(256), n(6), True, "b4")
    x = b.plain_conv(x, ch(512), 3, 2, "b5")
    p4 = b.c2f(x, ch(512), n(6), True, "b6")
    x = b.plain_conv(p4, ch(1024), 3, 2, "b7")
    x = b.c2f(x, ch(1024), n(3), True, "b8")
    p5 = b.sppf(x, ch(1024), "b9")
    x = b.upsample(p5, "n10")
    x = b.concat([x, p4], "n11")
    h4 = b.c2f(x, ch(512), n(3), False, "n12")
    x = b.plain_conv(h4, ch(512), 3, 2, "n13")
    x = b.concat([x, p5], "n14")
    h5 = b.c2f(x, ch(1024), n(3), False, "n15")
    return [h4, h5]


def _build_v10(b: _Builder, cfg: VariantConfig) -> list[str]:
    ch = lambda c: round_channels(min(c, cfg.max_channels) * cfg.width)
    n = lambda r: _repeats(r, cfg.depth)
    x = b.plain_conv("input", ch(64), 3, 2, "b0")
    x = b.plain_conv(x, ch(128), 3, 2, "b1")
    x = b.c2f(x, ch(128), n(3), True, "b2")
    x = b.plain_conv(x, ch(256), 3, 2, "b3")
    x = b.c2f(x, ch(256), n(6), True, "b4")
    x = b.scdown(x, ch(512), "b5")
    p4 = b.c2f(x, ch(512), n(6), True, "b6")
    x = b.scdown(p4, ch(1024), "b7")
    x = b.c2f(x, ch(1024), n(3), True, "b8")
    p5 = b.sppf(x, ch(1024), "b9")
    x = b.upsample(p5, "n10")
    x = b.concat([x, p4], "n11")
    h4 = b.c2f(x, ch(512), n(3), False, "n12")
    x = b.scdown(h4, ch(512), "n13")
    x = b.concat([x, p5], "n14")
    h5 = b.c2f(x, ch(1024), n(3), True, "n15", cib=True)
    return [h4, h5]


def build_graph(version: str, size: str = "big", num_classes: int = 20,
                input_resolution: int = 256, activation: str = "silu") -> GraphSpec:
    """Build one TinyissimoYOLO variant as an explicit layer graph.

    ``size`` is ignored for v10, which exists in a single configuration.
    """
    if version == "v10":
        size = "big"
    key = (version, size)
    if key not in VARIANTS:
        raise GraphError(f"unsupported version/size combination {version}/{size}")
    if num_classes < 1:
        raise GraphError("num_classes must be >= 1")
    if activation not in ACTIVATIONS:
        raise GraphError(f"unsupported activation {activation!r}")
    if input_resolution <= 0 or input_resolution % 32:
        raise GraphError(f"input resolution {input_resolution} not divisible by total stride 32")
    cfg = VARIANTS[key]
    b = _Builder(activation)
    if version == "v1_3":
        feats = _build_v13(b, size)
    elif version == "v5":
        feats = _build_v5(b, cfg)
    elif version == "v8":
        feats = _build_v8(b, cfg)
    else:
        feats = _build_v10(b, cfg)
    outs = b.detect(feats, num_classes, cfg.reg_hidden_min, one_to_one=version == "v10")
    return GraphSpec(
        version=version, size=size, width_multiple=cfg.width, depth_multiple=cfg.depth,
        num_classes=num_classes, input_resolution=input_resolution, layers=b.layers,
        outputs=outs, head_strides=[16, 32],
        head_kind="detect_v10" if version == "v10" else "detect_v8", activation=activation,
    )
