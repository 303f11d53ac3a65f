import numpy as np
import pytest
from hypothesis import given, strategies as st
from scipy import integrate

from lrns import fem


def test_mesh_counts():
    m1, m2, m32 = fem.build_mesh(1), fem.build_mesh(2), fem.build_mesh(32)
    assert m1.num_nodes == 4 and len(m1.cells) == 1
    assert m2.num_nodes == 9 and len(m2.cells) == 4
    assert m32.num_nodes == 1089
    assert list(fem.dof_map(m2).interior) == [4]
    with pytest.raises(ValueError):
        fem.build_mesh(0)


@given(st.integers(1, 12))
def test_mesh_invariants(n):
    mesh = fem.build_mesh(n)
    assert np.allclose(mesh.nodes * n, np.round(mesh.nodes * n), atol=1e-14)
    # counter-clockwise: signed area of every cell is +h^2
    p = mesh.nodes[mesh.cells]
    x, y = p[..., 0], p[..., 1]
    area = 0.5 * np.sum(x * np.roll(y, -1, axis=1) - np.roll(x, -1, axis=1) * y, axis=1)
    assert np.allclose(area, mesh.h ** 2)
    dofs = fem.dof_map(mesh)
    assert len(np.intersect1d(dofs.interior, dofs.boundary)) == 0
    assert len(dofs.interior) + len(dofs.boundary) == dofs.total == (n + 1) ** 2
    assert dofs.num_interior == (n - 1) ** 2


def _exact_element_mass():
    # int phi_i phi_j over the unit cell, by 1D products (1/3, 1/6)
    m1 = np.array([[1 / 3, 1 / 6], [1 / 6, 1 / 3]])
    corners = [(0, 0), (1, 0), (1, 1), (0, 1)]
    return np.array([[m1[a[0], b[0]] * m1[a[1], b[1]] for b in corners] for a in corners])


def test_mass_single_cell_closed_form():
    mesh = fem.build_mesh(1)
    c = mesh.cells[0]  # counter-clockwise corner order
    g = fem.assemble_mass(mesh).toarray()[np.ix_(c, c)]
    assert np.max(np.abs(g - _exact_element_mass())) <= 1e-14
    assert np.allclose(np.diag(g), 1 / 9)


def test_stiffness_single_cell_closed_form():
    mesh = fem.build_mesh(1)
    c = mesh.cells[0]
    a = fem.assemble_stiffness(mesh).toarray()[np.ix_(c, c)]
    assert np.allclose(np.diag(a), 2 / 3, atol=1e-14)
    assert np.isclose(a[0, 2], -1 / 3) and np.isclose(a[1, 3], -1 / 3)
    assert np.isclose(a[0, 1], -1 / 6)


def test_single_cell_matches_scipy_quadrature():
    # brute-force oracle: adaptive 2D quadrature of the bilinear shape functions
    phi = [lambda x, y: (1 - x) * (1 - y), lambda x, y: x * (1 - y), lambda x, y: x * y, lambda x, y: (1 - x) * y]
    dphi = [lambda x, y: (-(1 - y), -(1 - x)), lambda x, y: (1 - y, -x), lambda x, y: (y, x),
            lambda x, y: (-y, 1 - x)]
    mesh = fem.build_mesh(1)
    c = mesh.cells[0]
    g = fem.assemble_mass(mesh).toarray()[np.ix_(c, c)]
    a = fem.assemble_stiffness(mesh, lambda x, y: 1 + x * y).toarray()[np.ix_(c, c)]
    for i in range(4):
        for j in range(4):
            gij = integrate.dblquad(lambda y, x: phi[i](x, y) * phi[j](x, y), 0, 1, 0, 1)[0]
            aij = integrate.dblquad(lambda y, x: (1 + x * y) * np.dot(dphi[i](x, y), dphi[j](x, y)), 0, 1, 0, 1)[0]
            assert abs(g[i, j] - gij) <= 1e-12
            assert abs(a[i, j] - aij) <= 1e-12


@given(st.integers(1, 10))
def test_mass_properties(n):
    g = fem.assemble_mass(fem.build_mesh(n))
    assert abs(g.sum() - 1.0) <= 1e-13
    assert abs(g - g.T).max() == 0
    assert np.linalg.eigvalsh(g.toarray()).min() > 0


@given(st.integers(1, 8), st.floats(0.1, 5))
def test_stiffness_kernel_and_symmetry(n, c):
    mesh = fem.build_mesh(n)
    a = fem.assemble_stiffness(mesh, lambda x, y: c + x)
    assert np.max(np.abs(a @ np.ones(mesh.num_nodes))) <= 1e-12 * c * 10
    assert abs(a - a.T).max() <= 1e-15
    assert np.linalg.eigvalsh(a.toarray()).min() >= -1e-12


def test_coefficient_representations_agree():
    mesh = fem.build_mesh(5)
    a1 = fem.assemble_stiffness(mesh, lambda x, y: np.ones_like(x))
    a2 = fem.assemble_stiffness(mesh, np.ones(mesh.num_nodes))
    a3 = fem.assemble_stiffness(mesh, 1.0)
    a4 = fem.assemble_stiffness(mesh)
    for other in (a2, a3, a4):
        assert abs(a1 - other).max() <= 1e-14


def test_sign_indefinite_coefficient_allowed():
    mesh = fem.build_mesh(3)
    a = fem.assemble_stiffness(mesh, lambda x, y: x - 0.5)
    assert np.all(np.isfinite(a.data))


def test_load_examples():
    mesh = fem.build_mesh(2)
    assert not np.any(fem.assemble_load(mesh, 0.0))
    g = fem.assemble_mass(mesh)
    assert np.allclose(fem.assemble_load(mesh, 1.0), g @ np.ones(mesh.num_nodes), atol=1e-15)
    b = fem.assemble_load(mesh, lambda x, y, t: x)
    # refined-quadrature oracle: int x phi_i computed with scipy on each support
    hat = lambda xi, yi: (lambda x, y: max(0.0, 1 - abs(x - xi) * 2) * max(0.0, 1 - abs(y - yi) * 2))
    for i, (xi, yi) in enumerate(mesh.nodes):
        ref = integrate.dblquad(lambda y, x: x * hat(xi, yi)(x, y), max(0, xi - 0.5), min(1, xi + 0.5),
                                max(0, yi - 0.5), min(1, yi + 0.5), epsabs=1e-13)[0]
        assert abs(b[i] - ref) <= 1e-10


def test_family_linear_in_fields():
    mesh = fem.build_mesh(4)
    rng = np.random.default_rng(0)
    fields = rng.standard_normal((3, mesh.num_nodes))
    pattern, data = fem.assemble_stiffness_family(mesh, fields)
    c = np.array([0.3, -1.2, 2.0])
    combined = fem.with_data(pattern, c @ data)
    direct = fem.assemble_stiffness(mesh, c @ fields)
    assert abs(combined - direct).max() <= 1e-13


def test_block_slots_extract_blocks():
    mesh = fem.build_mesh(4)
    dofs = fem.dof_map(mesh)
    pattern, data = fem.assemble_stiffness_family(mesh, np.random.default_rng(1).standard_normal((2, 25)))
    block, slots = fem.block_slots(pattern, dofs.interior, dofs.boundary)
    full = fem.with_data(pattern, data[1])
    assert abs(fem.with_data(block, data[1][slots]) - fem.coupling_block(full, dofs)).max() == 0


def test_restriction_linear_and_sizes():
    mesh = fem.build_mesh(2)
    dofs = fem.dof_map(mesh)
    a = fem.assemble_stiffness(mesh)
    b = fem.assemble_stiffness(mesh, lambda x, y: x * y)
    mat, rhs = fem.restrict_dirichlet(a, np.ones(9), dofs)
    assert mat.shape == (1, 1) and rhs.shape == (1,)
    s1 = fem.interior_block(a + b, dofs)
    s2 = fem.interior_block(a, dofs) + fem.interior_block(b, dofs)
    assert abs(s1 - s2).max() == 0
    with pytest.raises(ValueError):
        fem.restrict_dirichlet(a, np.ones(8), dofs)


@given(st.integers(2, 9), st.floats(-2, 2), st.floats(-2, 2), st.floats(-2, 2))
def test_patch_test_linear_solutions(n, c0, cx, cy):
    mesh = fem.build_mesh(n)
    dofs = fem.dof_map(mesh)
    exact = c0 + cx * mesh.nodes[:, 0] + cy * mesh.nodes[:, 1]
    a = fem.assemble_stiffness(mesh)
    mat, rhs = fem.restrict_dirichlet(a, np.zeros(mesh.num_nodes), dofs, exact[dofs.boundary])
    u = np.linalg.solve(mat.toarray(), rhs)
    assert np.max(np.abs(u - exact[dofs.interior])) <= 1e-10
    full = fem.extend(u, dofs, exact[dofs.boundary])
    assert np.max(np.abs(full - exact)) <= 1e-10


def test_assembly_bit_identical():
    mesh = fem.build_mesh(6)
    f = lambda x, y: 1 + np.sin(x + y)
    a, b = fem.assemble_stiffness(mesh, f), fem.assemble_stiffness(mesh, f)
    assert np.array_equal(a.data, b.data) and np.array_equal(a.indices, b.indices)


def test_nodal_csv(tmp_path):
    mesh = fem.build_mesh(1)
    path = tmp_path / "f.csv"
    fem.write_nodal_csv(path, mesh, np.array([0.1, 0.2, 1 / 3, 4.0]))
    lines = path.read_text().splitlines()
    assert lines[0] == "x,y,value"
    assert lines[1] == "0,0,0.10000000000000001"
    assert lines[3].endswith("0.33333333333333331")
    with pytest.raises(ValueError):
        fem.write_nodal_csv(path, mesh, np.zeros(3))
