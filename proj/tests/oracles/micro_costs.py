"""Independent parameter/MAC oracle for the micro presets.

Builds each micro architecture directly as torch modules and counts learned
parameters (batchnorm running stats excluded) and conv/linear MACs with
forward hooks at a 1x32x32 input. Writes tests/fixtures/micro_costs.json.
"""
import json
import pathlib

import torch
from torch import nn


def conv_bn(cin, cout, k, s, groups=1, bias=False, bn=True, act=True):
    layers = [nn.Conv2d(cin, cout, k, s, k // 2, groups=groups, bias=bias)]
    if bn:
        layers.append(nn.BatchNorm2d(cout))
    if act:
        layers.append(nn.ReLU())
    return nn.Sequential(*layers)


def make_divisible(v, d=8):
    n = max(d, int(v + d / 2) // d * d)
    return n + d if n < 0.9 * v else n


class SE(nn.Module):
    def __init__(self, c):
        super().__init__()
        sq = make_divisible(c // 4)
        self.reduce = nn.Conv2d(c, sq, 1)
        self.expand = nn.Conv2d(sq, c, 1)

    def forward(self, x):
        g = x.mean((2, 3), keepdim=True)
        return x * torch.sigmoid(self.expand(torch.relu(self.reduce(g))))


class InvertedResidual(nn.Module):
    def __init__(self, cin, hidden, cout, k, s, se):
        super().__init__()
        layers = []
        if hidden != cin:
            layers.append(conv_bn(cin, hidden, 1, 1))
        layers.append(conv_bn(hidden, hidden, k, s, groups=hidden))
        if se:
            layers.append(SE(hidden))
        layers.append(conv_bn(hidden, cout, 1, 1, act=False))
        self.body = nn.Sequential(*layers)
        self.skip = s == 1 and cin == cout

    def forward(self, x):
        y = self.body(x)
        return x + y if self.skip else y


class ShuffleUnit(nn.Module):
    def __init__(self, cin, cout, s):
        super().__init__()
        b = cout // 2
        self.s = s
        if s == 2:
            self.branch1 = nn.Sequential(conv_bn(cin, cin, 3, 2, groups=cin, act=False), conv_bn(cin, b, 1, 1))
        c2 = cin if s == 2 else cin // 2
        self.branch2 = nn.Sequential(conv_bn(c2, b, 1, 1), conv_bn(b, b, 3, s, groups=b, act=False),
                                     conv_bn(b, b, 1, 1))

    def forward(self, x):
        if self.s == 1:
            a, c = x.chunk(2, dim=1)
            y = torch.cat([a, self.branch2(c)], 1)
        else:
            y = torch.cat([self.branch1(x), self.branch2(x)], 1)
        n, ch, h, w = y.shape
        return y.view(n, 2, ch // 2, h, w).transpose(1, 2).reshape(n, ch, h, w)


class Fire(nn.Module):
    def __init__(self, cin, sq, e1, e3, pool):
        super().__init__()
        self.pool = nn.MaxPool2d(3, 2, ceil_mode=True) if pool else nn.Identity()
        self.squeeze = conv_bn(cin, sq, 1, 1, bias=True)
        self.e1 = conv_bn(sq, e1, 1, 1, bias=True)
        self.e3 = conv_bn(sq, e3, 3, 1, bias=True)

    def forward(self, x):
        x = self.squeeze(self.pool(x))
        return torch.cat([self.e1(x), self.e3(x)], 1)


def with_head(features, channels, classes=28):
    return nn.Sequential(features, nn.AdaptiveAvgPool2d(1), nn.Flatten(), nn.Linear(channels, classes))


def mobile():
    return with_head(nn.Sequential(
        conv_bn(1, 16, 3, 2),
        InvertedResidual(16, 64, 24, 3, 2, True),
        InvertedResidual(24, 96, 24, 3, 1, True),
        InvertedResidual(24, 144, 48, 5, 2, True)), 48)


def mnas():
    return with_head(nn.Sequential(
        conv_bn(1, 16, 3, 2),
        InvertedResidual(16, 48, 24, 3, 2, False),
        InvertedResidual(24, 72, 24, 5, 1, False),
        InvertedResidual(24, 144, 48, 5, 2, False)), 48)


def shuffle():
    return with_head(nn.Sequential(
        conv_bn(1, 24, 3, 2),
        ShuffleUnit(24, 48, 2),
        ShuffleUnit(48, 48, 1),
        ShuffleUnit(48, 96, 2)), 96)


def squeeze():
    return with_head(nn.Sequential(
        conv_bn(1, 32, 3, 2, bias=True),
        Fire(32, 16, 32, 32, True),
        Fire(64, 16, 48, 48, False),
        Fire(96, 24, 64, 64, True)), 128)


def count(model):
    macs = 0

    def hook(mod, inp, out):
        nonlocal macs
        if isinstance(mod, nn.Conv2d):
            k = mod.kernel_size[0] * mod.kernel_size[1]
            macs += out.numel() * k * mod.in_channels // mod.groups
        elif isinstance(mod, nn.Linear):
            macs += mod.in_features * mod.out_features * out.shape[0]

    for m in model.modules():
        if isinstance(m, (nn.Conv2d, nn.Linear)):
            m.register_forward_hook(hook)
    model.eval()
    with torch.no_grad():
        logits = model(torch.zeros(1, 1, 32, 32))
    assert logits.shape == (1, 28)
    params = sum(p.numel() for p in model.parameters())
    return {"params": params, "macs": macs}


if __name__ == "__main__":
    result = {name: count(fn()) for name, fn in
              [("mobile", mobile), ("mnas", mnas), ("shuffle", shuffle), ("squeeze", squeeze)]}
    out = pathlib.Path(__file__).resolve().parent.parent / "fixtures" / "micro_costs.json"
    out.write_text(json.dumps(result, indent=2) + "\n")
    print(json.dumps(result))
