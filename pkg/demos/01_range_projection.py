"""Turn one synthetic scan into a range image and map its labels back.

Run with ``python3 demos/01_range_projection.py``.
"""

import numpy as np

from riunet.projection import ProjectionConfig, backproject_labels, project
from riunet.scene import SceneSpec, generate_scene

cfg = ProjectionConfig()  # 512 x 64, 90 degrees wide
cloud = generate_scene(SceneSpec(seed=3))
print(f"scan: {len(cloud)} points, classes present {sorted(set(cloud.labels.tolist()))}")

image = project(cloud, cfg)
valid = image.mask > 0
print(f"range image {image.shape}: {valid.sum()} valid pixels ({valid.mean():.1%})")
print(f"depth on valid pixels: {image.depth[valid].min():.2f} m to {image.depth[valid].max():.2f} m")

# Every point that landed in the field of view reads its label back from the grid.
back = backproject_labels(image, cloud)
inside = image.index_map[:, 0] >= 0
agree = np.mean(back[inside] == cloud.labels[inside])
print(f"label agreement after the round trip: {agree:.4f}")

# Each row is one laser ring; a crude text picture of the class grid:
glyphs = np.array(list(".CPY"))
for row in range(0, cfg.height, 8):
    line = np.where(valid[row], glyphs[image.labels[row]], " ")
    print("".join(line[::4]))
