"""Finite-difference audit of every differentiable operation and of the full loss.

Run: python3 demos/05_gradient_audit.py
"""

from moalign.gradaudit import AUDIT_TOL, gradient_audit

result = gradient_audit(seed=0)
print(f"{len(result.errors)} cases in {result.seconds:.1f}s, tolerance {AUDIT_TOL:g}")
worst = sorted(result.errors.items(), key=lambda kv: -kv[1])[:8]
for name, err in worst:
    print(f"  {name:<32}{err:.2e}")
print("passed:", result.passed())
