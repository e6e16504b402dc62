# coding: utf-8

# # Scoring boxes
#
# Precision at an IoU threshold counts a prediction as correct only when its
# IoU is strictly above the threshold. meanIoU averages per-pair IoU, while
# cumIoU divides total intersection by total union, so large boxes weigh more.

# %%

from vgpeft.metrics import BBox, PairRecord, iou, report

half = PairRecord("a", "img0", "the ship on the left", BBox(0, 0, 10, 10), BBox(5, 5, 15, 15), "ship")
exact = PairRecord("b", "img1", "the vehicle on the top", BBox(20, 20, 30, 30), BBox(20, 20, 30, 30),
                   "vehicle")
print("IoU of the offset pair:", iou(half.gt, half.pred))

# %%

rep = report([half, exact])
print(rep.render("two pairs"))

# %% [markdown]
# A box covering exactly half the target sits on the 0.5 boundary and is not
# counted.

# %%

edge = PairRecord("c", "img2", "q", BBox(0, 0, 10, 10), BBox(0, 0, 10, 5))
print(iou(edge.gt, edge.pred), report([edge]).pr_at[0.5])

# %% [markdown]
# Mean and cumulative IoU can rank two systems differently.

# %%

small_good = PairRecord("d", "i", "q", BBox(0, 0, 2, 2), BBox(0, 0, 2, 2))
large_bad = PairRecord("e", "i", "q", BBox(0, 0, 100, 100), BBox(0, 0, 100, 10))
r = report([small_good, large_bad])
print(f"meanIoU {r.mean_iou:.2f}  cumIoU {r.cum_iou:.2f}")
