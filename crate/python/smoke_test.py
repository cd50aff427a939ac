"""Smoke test for the pytvflow extension module.

Run after `cargo build -p tvflow-python --features extension-module`; the module is
loaded from an installed package if present, otherwise from the cargo target directory.
"""

import importlib.machinery
import importlib.util
import math
import pathlib
import sys

ROOT = pathlib.Path(__file__).resolve().parent.parent


def load():
    try:
        import pytvflow

        return pytvflow
    except ImportError:
        pass
    for profile in ("release", "debug"):
        lib = ROOT / "target" / profile / "libpytvflow.so"
        if lib.exists():
            loader = importlib.machinery.ExtensionFileLoader("pytvflow", str(lib))
            spec = importlib.util.spec_from_loader("pytvflow", loader)
            module = importlib.util.module_from_spec(spec)
            loader.exec_module(module)
            return module
    sys.exit("pytvflow not found; build it with cargo build -p tvflow-python --features extension-module")


def main():
    tv = load()

    mesh = tv.Mesh.structured(4)
    assert (mesh.num_vertices, mesh.num_cells) == (25, 32)
    assert abs(mesh.h_mesh - math.sqrt(2) / 4) < 1e-15
    assert tv.Mesh.from_text(mesh.serialize()).vertices() == mesh.vertices()

    ref = tv.Mesh([(0.0, 0.0), (1.0, 0.0), (0.0, 1.0)], [(0, 1, 2)])
    assert ref.cell_gradients([0.0, 1.0, 0.0]) == [(1.0, 0.0)]
    try:
        tv.Mesh([(0.0, 0.0), (0.0, 1.0), (1.0, 0.0)], [(0, 1, 2)])
        raise AssertionError("clockwise triangle accepted")
    except ValueError:
        pass

    fx, fy = tv.flux((3.0, 4.0), 1e-12)
    assert abs(fx - 0.6) < 1e-12 and abs(fy - 0.8) < 1e-12

    # Constant data equal to the fidelity target is a fixed point.
    u, iterations = tv.solve_step(mesh, [0.3] * 25, 1e-3, 1e-2, lam=1.0, g=0.3)
    assert max(abs(x - 0.3) for x in u) < 1e-14 and iterations == 0

    p = tv.project_cosine(tv.Mesh.structured(8), 1.0)
    assert p.grad_l2_error < 0.5 and len(p.values) == 81

    run = tv.run_manufactured(tv.Mesh.structured(4), final_time=1e-3, dt=1e-4)
    assert run.steps == 10 and run.e1 < 0.2

    orders = tv.observed_order([(0.4, 0.16), (0.2, 0.04)])
    assert abs(orders[0] - 2.0) < 1e-12

    print(f"pytvflow smoke test passed: {mesh!r}, E1 = {run.e1:.4e}, E2 = {run.e2:.4e}")


if __name__ == "__main__":
    main()
