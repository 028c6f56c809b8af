from gancompose import gradsuite as gs


def test_suite_covers_every_kind():
    kinds = {c.kind for c in gs.all_checks()}
    assert kinds == {"primitive", "loss", "objective"}
    names = [c.name for c in gs.all_checks()]
    assert len(names) == len(set(names))


def test_objective_checks_cover_every_mode():
    names = {c.name for c in gs.all_checks() if c.kind == "objective"}
    for mode in ("refine_inset", "joint_refine", "body_for_face", "montage", "multi_inset"):
        assert any(n.startswith(mode) for n in names)


def test_selected_checks_pass_and_serialize():
    results = gs.run_suite(points=2, names=["matmul.lhs", "crop", "border_loss"])
    assert [r.name for r in results] == ["matmul.lhs", "crop", "border_loss"]
    assert all(r.passed for r in results)
    lines = gs.results_csv(results).splitlines()
    assert lines[0] == "name,kind,points,max_rel_error,passed"
    assert all(line.endswith(",1") for line in lines[1:])


def test_checks_are_reproducible():
    a = gs.run_suite(points=2, names=["tanh", "appearance_loss"])
    b = gs.run_suite(points=2, names=["tanh", "appearance_loss"])
    assert [r.max_rel_error for r in a] == [r.max_rel_error for r in b]
