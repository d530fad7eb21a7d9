"""
Scoring detections
==================

IoU, matching and 101-point average precision on hand-made scenes.
"""

from dcap.metrics import BoxXYXY, PredictionRecord, average_precision, evaluate, iou

# Two 2x2 squares offset by one pixel overlap in one unit cell out of seven.
print("IoU (0,0,2,2) vs (1,1,3,3):", iou((0, 0, 2, 2), (1, 1, 3, 3)), "=", 1 / 7)

# Ranked hits and misses: a hit, a false alarm, then a second hit, against
# two ground-truth objects. Precision falls to 1/2 after the miss and climbs
# back to 2/3; the interpolated envelope keeps the later, higher value.
print("AP for [TP, FP, TP] on 2 objects:", round(average_precision([True, False, True], 2), 4))


def det(cls, score, *box):
    return PredictionRecord(BoxXYXY(*map(float, box)), score, cls)


# One image, two classes. The duplicate on the first object counts as a
# false positive; the noise detection with no matching object does too.
gts = [[(0, (10, 10, 30, 30)), (1, (40, 5, 60, 20))]]
dets = [[
    det(0, 0.95, 11, 10, 30, 31),
    det(0, 0.60, 10, 12, 29, 30),
    det(1, 0.80, 40, 6, 58, 20),
    det(1, 0.30, 0, 40, 8, 48),
]]
report = evaluate(dets, gts)
print(report.to_table(), end="")
print(report.to_csv(), end="")
