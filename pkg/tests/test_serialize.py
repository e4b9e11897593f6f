import numpy as np
import pytest

from hyblpv.amb import weighted_interconnection
from hyblpv.lpv import AffineMatrices
from hyblpv.serialize import (controller_from_text, controller_to_text, plant_from_text, plant_to_text,
                              read_controller, read_plant, read_solution, solution_from_text,
                              solution_to_text, write_controller, write_plant, write_solution)
from hyblpv.synthesis import validate_certificate
from hyblpv.textio import FormatError, Writer, parse
from conftest import toy_plant, toy_terms


# generic format ----------------------------------------------------------------

def test_writer_parser_round_trip():
    w = Writer("thing", 1)
    w.comment("hello")
    w.field("name", "two words")
    w.field("vals", 1, 2.5, 1 / 3, True)
    w.begin("part", 7)
    w.matrix("M", np.array([[1.0, -0.1], [np.pi, 1e-300]]))
    w.matrix("E", np.zeros((2, 0)))
    w.end()
    root = parse(w.text(), "thing")
    assert root.str("name") == "two words"
    assert root.floats("vals") == [1.0, 2.5, 1 / 3, 1.0]
    sec = root.section("part")
    assert sec.args == ["7"]
    assert np.array_equal(sec.matrix("M"), np.array([[1.0, -0.1], [np.pi, 1e-300]]))
    assert sec.matrix("E").shape == (2, 0)


def test_writer_refuses_unclosed_section():
    w = Writer("thing", 1)
    w.begin("a")
    with pytest.raises(ValueError):
        w.text()


@pytest.mark.parametrize("text,line,msg", [
    ("", 1, "empty"),
    ("other 1\n", 1, "header"),
    ("thing 2\n", 1, "version"),
    ("thing 1\nend x\n", 2, "without"),
    ("thing 1\nbegin a\nend b\n", 3, "expected 'end a'"),
    ("thing 1\nbegin a\nk 1\n", 3, "not closed"),
    ("thing 1\nmatrix M 2 2\n1 2\n3\n", 4, "row 2"),
    ("thing 1\nmatrix M 2 2\n1 2\n", 3, "ends after"),
    ("thing 1\nmatrix M 1 1\nx\n", 3, "not numeric"),
    ("thing 1\nmatrix M 1 1\nnan\n", 2, "non-finite"),
    ("thing 1\nmatrix M one 1\n", 2, "integer"),
    ("thing 1\nk 'open\n", 2, "quoting"),
])
def test_parse_errors_carry_line(text, line, msg):
    with pytest.raises(FormatError, match=msg) as exc:
        parse(text, "thing")
    assert exc.value.line == line


def test_accessor_errors():
    root = parse("thing 1\nk 1 2\nk 3\nj x\n", "thing")
    with pytest.raises(FormatError) as exc:
        root.entry("k")
    assert exc.value.line == 3
    with pytest.raises(FormatError, match="non-numeric"):
        root.float("j")
    with pytest.raises(FormatError, match="lacks 'q'"):
        root.str("q")
    assert root.str("q", optional=True) is None


def test_source_in_message():
    with pytest.raises(FormatError, match="f.txt:1"):
        parse("x 1\n", "thing", source="f.txt")


# solutions ---------------------------------------------------------------------

def test_solution_round_trip(toy_design, tmp_path):
    sol, K = toy_design
    prov = {"config_sha256": "abc", "note": "two words"}
    text = solution_to_text(sol, prov)
    back, p2 = solution_from_text(text, toy_plant())
    assert p2 == prov
    assert solution_to_text(back, prov) == text
    assert back.gammas == sol.gammas
    for i in range(2):
        for a, b in zip(back.certificate.S[i], sol.certificate.S[i]):
            assert np.array_equal(a, b)
    assert set(back.dhat) == set(sol.dhat)
    assert validate_certificate(back, K).passed
    path = tmp_path / "x.solution"
    write_solution(path, sol, prov)
    again, _ = read_solution(path, toy_plant())
    assert again.gammas == sol.gammas


def test_solution_without_plant(toy_design):
    sol, _ = toy_design
    back, _ = solution_from_text(solution_to_text(sol))
    assert back.plant is None
    assert back.diagnostics["partition"].size == 2


def test_solution_partition_mismatch(toy_design):
    sol, _ = toy_design
    with pytest.raises(FormatError, match="partition"):
        solution_from_text(solution_to_text(sol), toy_plant(((0.0, 0.7), (0.4, 1.0))))


def test_solution_asymmetric_matrix_rejected(toy_design):
    sol, _ = toy_design
    lines = solution_to_text(sol).splitlines()
    k = next(i for i, l in enumerate(lines) if l.strip().startswith("matrix S1"))
    row = lines[k + 1].split()
    row[1] = repr(float(row[1]) + 1.0)
    lines[k + 1] = "      " + " ".join(row)
    with pytest.raises(FormatError, match="symmetric") as exc:
        solution_from_text("\n".join(lines))
    assert exc.value.line == k + 1


def test_solution_region_out_of_range(toy_design):
    sol, _ = toy_design
    text = solution_to_text(sol).replace("begin region 2", "begin region 5")
    with pytest.raises(FormatError, match="region"):
        solution_from_text(text)


# controllers -------------------------------------------------------------------

def test_controller_round_trip(toy_design, tmp_path):
    sol, K = toy_design
    text = controller_to_text(K, {"k": "v"})
    back, prov = controller_from_text(text)
    assert prov == {"k": "v"}
    assert controller_to_text(back, {"k": "v"}) == text
    assert back.convention == K.convention and back.rate_dependent == K.rate_dependent
    assert np.array_equal(back.state_transform, K.state_transform)
    for ta, tb in zip(back.tables, K.tables):
        for a, b in zip(ta, tb):
            assert np.array_equal(a.Ak0, b.Ak0) and np.array_equal(a.Bk, b.Bk)
    for key in K.resets:
        assert np.array_equal(back.resets[key], K.resets[key])
    assert validate_certificate(sol, back).passed
    write_controller(tmp_path / "k.controller", K)
    assert read_controller(tmp_path / "k.controller")[0].regions == 2


def test_controller_corrupt_row_line(toy_design):
    _, K = toy_design
    lines = controller_to_text(K).splitlines()
    k = next(i for i, l in enumerate(lines) if l.strip().startswith("matrix Bk"))
    lines[k + 1] += " 1.0"
    with pytest.raises(FormatError, match="row 1 has 2 values") as exc:
        controller_from_text("\n".join(lines))
    assert exc.value.line == k + 2


def test_controller_wrong_kind(toy_design):
    sol, _ = toy_design
    with pytest.raises(FormatError, match="header"):
        controller_from_text(solution_to_text(sol))


# plants ------------------------------------------------------------------------

def test_plant_round_trip(tmp_path):
    fn = AffineMatrices(toy_terms())
    back = plant_from_text(plant_to_text(fn))
    for name, coefs in fn.terms.items():
        assert all(np.array_equal(a, b) for a, b in zip(coefs, back.terms[name]))
    amb = weighted_interconnection()
    write_plant(tmp_path / "amb.plant", amb)
    P, Q = amb([777.0]), read_plant(tmp_path / "amb.plant")([777.0])
    assert all(np.array_equal(a, b) for a, b in zip(P, Q))


def test_plant_missing_block():
    text = plant_to_text(AffineMatrices(toy_terms()))
    start = text.index("begin block D22")
    end = text.index("end block", start) + len("end block D22")
    with pytest.raises(FormatError, match="D22"):
        plant_from_text(text[:start] + text[end:])


def test_plant_inconsistent_dims():
    text = plant_to_text(AffineMatrices(toy_terms()))
    lines = text.splitlines()
    k = next(i for i, l in enumerate(lines) if l.strip() == "matrix M0 2 1")  # B2
    lines[k] = lines[k].replace("2 1", "1 2")
    lines[k + 1:k + 3] = ["    0.0 1.0"]
    with pytest.raises(FormatError) as exc:
        plant_from_text("\n".join(lines))
    assert exc.value.line > 0
