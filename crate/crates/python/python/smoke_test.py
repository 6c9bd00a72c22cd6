"""Smoke test for the idattn_py extension. Run after `maturin develop`."""

import json

import idattn_py as ia


def test_layout_and_masks():
    boxes = [(0, 0, 8, 6, "AB", "CD"), (24, 24, 12, 6, "EFG", "HIJ")]
    lay = ia.layout(boxes)
    assert len(lay["t_inst"]) == 2
    n, dis, har = ia.masks(boxes)
    assert n == lay["seq_len"] and len(dis) == n * n and len(har) == n * n
    t0 = lay["t_inst"][0]["start"]
    t1 = lay["t_inst"][1]["start"]
    assert dis[t0 * n + t1] == 0
    assert har[t0 * n + t1] == 0
    n0, dis0, har0 = ia.masks([])
    assert dis0 == har0 == bytes([1]) * (n0 * n0)


def test_schedule_and_prompt():
    assert ia.schedule(8, 2, 2) == ["har"] * 2 + ["dis"] * 4 + ["har"] * 2
    ids, glen, lens = ia.encode_prompt(["AB", ""])
    assert glen == 8 and lens == [4, 2] and len(ids) == 14


def test_metrics():
    assert ia.levenshtein("kitten", "sitting") == 3
    assert ia.cer("ABC", "ABD") == 1 / 3
    r = ia.elo([("x", "y", "a")])
    assert r == {"x": 1216.0, "y": 1184.0}
    img = ia.Image.filled(8, 8, (10, 20, 30))
    assert ia.region_mae_mse(img, img, []) == (0.0, 0.0)
    try:
        ia.elo([("x", "y", "win")])
    except ia.IdattnError:
        pass
    else:
        raise AssertionError("bad result accepted")


def test_render_decode_round_trip():
    ref, tgt, boxes = ia.render_sample(3)
    assert ia.Image.from_ppm(ref.to_ppm()) == ref
    for b in boxes:
        assert ia.decode_glyphs(ref, b) == b[4]
        assert ia.decode_glyphs(tgt, b) == b[5]
    small = json.dumps({"width": 24, "height": 24, "max_boxes": 1})
    r2, _, b2 = ia.render_sample(0, small)
    assert (r2.width, r2.height, len(b2)) == (24, 24, 1)


if __name__ == "__main__":
    for name, fn in sorted(globals().items()):
        if name.startswith("test_"):
            fn()
            print("ok", name)
