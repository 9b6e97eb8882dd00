"""Regenerate the bundled scenario map files.

Run from the repository root: ``python scripts/make_maps.py``.
"""

import json
from pathlib import Path

import numpy as np

OUT = Path(__file__).resolve().parents[1] / "src" / "reactplan" / "sim" / "maps"
W = 3.5


def line(p0, p1, step=1.0):
    p0, p1 = np.asarray(p0, float), np.asarray(p1, float)
    n = int(np.ceil(np.linalg.norm(p1 - p0) / step))
    return [[round(float(x), 6), round(float(y), 6)] for x, y in np.linspace(p0, p1, n + 1)]


def lane(lane_id, points, speed_limit, priority=0, left=None, right=None, ego=False):
    return {"id": lane_id, "points": points, "speed_limit": speed_limit, "priority": priority,
            "left": left, "right": right, "ego_drivable": ego}


def flow(lane_id, inter_arrival, desired, yield_threshold=(-0.5, 2.5)):
    return {"lane": lane_id, "inter_arrival": list(inter_arrival),
            "desired_speed": list(desired), "yield_threshold": list(yield_threshold)}


def intersection():
    h = W / 2
    return {
        "name": "intersection",
        "description": "Unsignalized crossing of two 2-lane roads (one lane per direction), "
                       "lanes 200 m long centred on the origin; east-west road has priority.",
        "lane_width": W,
        "lanes": [
            lane("sn", line((h, -100), (h, 100)), 10.0, ego=True),
            lane("ns", line((-h, 100), (-h, -100)), 10.0),
            lane("we", line((-100, -h), (100, -h)), 10.0, priority=1),
            lane("ew", line((100, h), (-100, h)), 10.0, priority=1),
        ],
        "ego": {"lane": "sn", "s": 60.0, "speed": 6.0},
        "goal": {"lane": "sn", "s_min": 140.0, "s_max": 170.0},
        "flows": [
            flow("we", (2.0, 5.0), (7.0, 10.0)),
            flow("ew", (2.0, 5.0), (7.0, 10.0)),
            flow("ns", (5.0, 10.0), (7.0, 10.0)),
        ],
        "platoon": None,
    }


def merge():
    xs = np.arange(40.0, 100.0 + 1e-9, 1.0)
    ramp = [[round(float(x), 6), round(float(-W - 21.5 * (1 - (x - 40) / 60) ** 2), 6)] for x in xs]
    ramp += line((100, -W), (170, -W))[1:]
    return {
        "name": "merge",
        "description": "Three-lane main road (y = 0, 3.5, 7) from x = 0 to 300 with an on-ramp "
                       "curving in from (40, -25) and running as an acceleration lane at y = -3.5 "
                       "until x = 170. The ego must reach the leftmost lane.",
        "lane_width": W,
        "lanes": [
            lane("ramp", ramp, 12.0, left="m0", ego=True),
            lane("m0", line((0, 0), (300, 0)), 12.0, left="m1", right="ramp", ego=True),
            lane("m1", line((0, W), (300, W)), 12.0, left="m2", right="m0", ego=True),
            lane("m2", line((0, 2 * W), (300, 2 * W)), 12.0, right="m1", ego=True),
        ],
        "ego": {"lane": "ramp", "s": 5.0, "speed": 8.0},
        "goal": {"lane": "m2", "s_min": 200.0, "s_max": 260.0},
        "flows": [
            flow("m0", (2.5, 6.0), (8.0, 11.0)),
            flow("m1", (2.5, 6.0), (8.0, 11.0)),
            flow("m2", (4.0, 8.0), (9.0, 12.0)),
        ],
        "platoon": None,
    }


def overtake():
    return {
        "name": "overtake",
        "description": "Two-lane one-way road (y = 0 and 3.5) from x = 0 to 300. A slow platoon "
                       "drives ahead of the ego in the right lane; faster traffic uses the left "
                       "lane. The ego must pass the platoon and return to the right lane.",
        "lane_width": W,
        "lanes": [
            lane("o0", line((0, 0), (300, 0)), 12.0, left="o1", ego=True),
            lane("o1", line((0, W), (300, W)), 12.0, right="o0", ego=True),
        ],
        "ego": {"lane": "o0", "s": 20.0, "speed": 6.0},
        "goal": {"lane": "o0", "s_min": 220.0, "s_max": 280.0},
        "flows": [flow("o1", (3.0, 7.0), (9.0, 12.0))],
        "platoon": {"lane": "o0", "count": [3, 5], "lead_gap": [20.0, 30.0],
                    "spacing": [10.0, 16.0], "speed": [3.0, 5.0]},
    }


if __name__ == "__main__":
    OUT.mkdir(parents=True, exist_ok=True)
    for build in (intersection, merge, overtake):
        doc = build()
        (OUT / f"{doc['name']}.json").write_text(json.dumps(doc, indent=1) + "\n")
        print("wrote", doc["name"])
