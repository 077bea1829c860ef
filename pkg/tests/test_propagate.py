import pytest

from flor import propagate
from flor.errors import UnalignableVersion

from corpus import BASE, MARKER, NEW, block_path, corpus_outcomes, mutate, splice, var_of


def test_mutation_corpus_block_accuracy():
    outcomes = corpus_outcomes()
    total = len(outcomes)
    ok = sum(v == "ok" for v in outcomes.values())
    misplaced = [k for k, v in outcomes.items() if v == "misplaced"]
    refused = [k for k, v in outcomes.items() if v == "refused"]
    print(f"propagation corpus: {ok}/{total} in oracle block, {len(refused)} refused, {len(misplaced)} misplaced")
    assert not misplaced, misplaced[:10]
    assert ok / total >= 0.95, refused[:10]


@pytest.mark.parametrize("key", sorted(NEW))
def test_identity_version_gets_exact_oracle(key):
    # with nothing changed, propagation must reproduce the newer source exactly
    y = splice(BASE, MARKER[key], NEW[key])
    assert propagate.propagate(BASE, y, [var_of(key)]).source == y


def test_renamed_identifiers_are_rewritten():
    x = mutate(["rename_grad"])
    y = splice(BASE, "step", NEW["step_dep"])
    res = propagate.propagate(x, y, ["g2"])
    assert "g2 = g ** 2" in res.source
    assert "grad" not in res.source
    compile(res.source, "x.py", "exec")


def test_propagation_is_idempotent():
    x = mutate(["insert_preprocess", "rename_w"])
    y = splice(BASE, "suffix", NEW["suffix"])
    once = propagate.propagate(x, y, ["final_w"]).source
    assert propagate.propagate(once, y, ["final_w"]).source == once


def test_existing_dependency_not_duplicated():
    y = splice(BASE, "step", NEW["step_dep"])
    x = splice(BASE, "step", "g2 = grad ** 2")
    res = propagate.propagate(x, y, ["g2"])
    assert res.source.count("g2 = grad ** 2") == 1


def test_plain_loop_is_a_counterpart():
    x = BASE.replace('        for step in flor.loop("step", range(4)):\n', "        for step in range(4):\n")
    y = splice(BASE, "step", NEW["step"])
    res = propagate.propagate(x, y, ["gx"])
    assert block_path(res.source, "gx") == block_path(splice(x, "step", NEW["step"]), "gx")


def test_missing_enclosing_loop_refused():
    lines = BASE.splitlines(keepends=True)
    start = next(i for i, l in enumerate(lines) if "flor.loop(\"step\"" in l)
    end = next(i for i, l in enumerate(lines) if l.strip() == "total += grad")
    x = "".join(lines[:start] + ["        w += 0.1\n"] + lines[end + 1 :])
    y = splice(BASE, "step", NEW["step"])
    with pytest.raises(UnalignableVersion, match="loop"):
        propagate.propagate(x, y, ["gx"])


def test_block_oracle_detects_wrong_block():
    a = block_path(splice(BASE, "step", NEW["step"]), "gx")
    b = block_path(splice(BASE, "epoch", NEW["step"]), "gx")
    assert a != b


def test_undefined_name_refused():
    y = splice(BASE, "suffix", 'flor.log("extra", brand_new_thing)')
    with pytest.raises(UnalignableVersion, match="brand_new_thing"):
        propagate.propagate(BASE, y, ["extra"])


def test_untouched_lines_stay_byte_identical():
    x = mutate(["insert_preprocess", "constant_change"])
    y = splice(BASE, "epoch", NEW["epoch"])
    res = propagate.propagate(x, y, ["w_epoch"])
    out = res.source.splitlines()
    del out[res.lines[0] - 1]
    assert "\n".join(out) + "\n" == x


def test_anchor_map_is_injective():
    m = propagate.align(mutate(["rename_val", "insert_in_step"]), BASE)
    assert len(set(m.y2x.values())) == len(m.y2x)
    assert all(m.x2y[x] is y for y, x in m.y2x.items())
