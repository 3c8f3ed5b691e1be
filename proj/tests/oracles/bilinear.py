"""Reference bilinear resizes (half-pixel centers, edge clamp) from torch."""
import json
import pathlib

import torch
import torch.nn.functional as F

src = torch.tensor([[(i * 7 % 11) / 10.0 for i in range(r * 4, r * 4 + 4)] for r in range(3)],
                   dtype=torch.float64)
cases = []
for h, w in [(5, 3), (2, 7), (1, 2), (6, 8)]:
    out = F.interpolate(src[None, None], size=(h, w), mode="bilinear", align_corners=False)
    cases.append({"height": h, "width": w, "values": out[0, 0].flatten().tolist()})
two = torch.tensor([[0.0, 1.0], [0.0, 1.0]], dtype=torch.float64)
small = F.interpolate(two[None, None], size=(1, 2), mode="bilinear", align_corners=False)
result = {"source": src.flatten().tolist(), "source_height": 3, "source_width": 4, "cases": cases,
          "two_by_two_to_1x2": small.flatten().tolist()}
out = pathlib.Path(__file__).resolve().parent.parent / "fixtures" / "bilinear.json"
out.write_text(json.dumps(result, indent=1) + "\n")
print(result["two_by_two_to_1x2"])
