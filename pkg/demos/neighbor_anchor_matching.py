"""Why object-level alignment pairs predictions by IoU instead of by anchor.

Both branches see the same car but decode their best box from adjacent
anchors. Pairing by anchor id finds nothing to align; pairing by BEV IoU
recovers the obvious match.

    python demos/neighbor_anchor_matching.py
"""
import numpy as np

from stereoguide.anchors import assign_targets
from stereoguide.boxes import iou_bev
from stereoguide.matcher import match_by_iou, match_same_anchor, neighbor_anchor_scenario


def main():
    sc = neighbor_anchor_scenario()
    assign = assign_targets(sc["grid"], [sc["gt"]])
    np.set_printoptions(precision=3, suppress=True)
    print("ground truth       ", np.asarray(sc["gt"]))
    print("stereo prediction  ", sc["stereo_boxes"][0], "from anchor", sc["stereo_anchor_ids"][0])
    print("mono prediction    ", sc["mono_boxes"][0], "from anchor", sc["mono_anchor_ids"][0])
    print("foreground anchors ", assign.fg.tolist())
    print("IoU(mono, stereo)  ", round(iou_bev(sc["mono_boxes"][0], sc["stereo_boxes"][0]), 3))
    print()
    print("same-anchor pairs  ", match_same_anchor(sc["mono_anchor_ids"], sc["stereo_anchor_ids"]).pairs)
    print("IoU-matched pairs  ", match_by_iou(sc["mono_boxes"], sc["stereo_boxes"]).pairs)


if __name__ == "__main__":
    main()
