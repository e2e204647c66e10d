"""Whole-slide acquisition time for fine and coarse focus searches.

Run with ``python demos/scan_time.py``.  Prints the per-slide budget for a
208-field slide and shows how the saving grows with slide size.
"""

from vstain.scan import COARSE, FINE, ScanPlan, autofocus_point_time, compare_plans, plan_scan

print(f"one focus point: fine {autofocus_point_time(FINE):.1f} s, coarse {autofocus_point_time(COARSE):.1f} s")

fine = plan_scan(ScanPlan.for_mode("fine", 208))
coarse = plan_scan(ScanPlan.for_mode("coarse", 208))
for name, r in (("fine", fine), ("coarse", coarse)):
    print(f"{name:>6}: {r.focus_points:5.1f} points, autofocus {r.autofocus_time / 60:5.2f} min, "
          f"total {r.total_time / 60:5.2f} min")
sv = compare_plans(fine, coarse)
print(f"saving: autofocus {sv['autofocus_pct']:.1f}%, total {sv['total_pct']:.1f}%")

# capture time dominates once focus search is cheap, so the total saving
# is the same fraction for every slide size
for n in (50, 208, 900, 2000):
    f, c = (plan_scan(ScanPlan.for_mode(m, n)) for m in ("fine", "coarse"))
    print(f"{n:5d} fields: {f.total_time / 60:6.1f} -> {c.total_time / 60:6.1f} min")
