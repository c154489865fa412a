"""Builder for the seeded 1000-line pipeline fixture.

Every expected count is known by construction: the builder injects a
fixed number of malformed lines, too-short rows, length-mismatched rows,
exact duplicates, near-duplicate clusters, wrong-language rows,
low-confidence rows, and over-threshold-loss rows, then verifies the
SimHash conflict structure it relied on (and raises if the seed ever
stops satisfying it).

Layout: 1000 input lines = 990 records + 10 malformed. Expected report:
clean 990/0, prefilter 950/40, dedup 915/35, langid 880/35,
quality 865/15, format 865/0; tau = 9.0 for both language pairs.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from forge.refinery import RefineryConfig, fnv1a64, hamming, simhash64

FIXTURE_SEED = 20250810

N_GOOD_EN = 850
N_ZH = 50
N_SHORT = 20
N_MISMATCH = 20
N_DUP = 30
N_CLUSTERS = 5
N_WRONG_LANG = 25
N_LOWCONF = 10
N_HIGHLOSS_EN = 12
N_HIGHLOSS_ZH = 3

VOCAB = [f"w{i:04d}" for i in range(4000)]
# the full CJK block: a narrow slice gives FNV-correlated per-char hashes
# and degenerate signature bits, which breaks the "no accidental
# conflicts" assumption the golden counts rest on
HAN = [chr(0x4E00 + i) for i in range(20000)]

EXPECTED_STAGES = {
    "clean": {"kept": 990, "dropped": 0},
    "prefilter": {"kept": 950, "dropped": 40},
    "dedup": {"kept": 915, "dropped": 35},
    "langid": {"kept": 880, "dropped": 35},
    "quality": {"kept": 865, "dropped": 15},
    "format": {"kept": 865, "dropped": 0},
}
EXPECTED_MALFORMED = 10
EXPECTED_THRESHOLDS = {"en-de": 9.0, "zh-en": 9.0}


@dataclass
class FixtureBundle:
    lines: list[str]
    langid_sidecar: str
    quality_sidecar: str
    dev_lines: list[str]
    dev_sidecar: str
    expected_stages: dict = field(default_factory=lambda: EXPECTED_STAGES)
    expected_malformed: int = EXPECTED_MALFORMED
    expected_thresholds: dict = field(default_factory=lambda: EXPECTED_THRESHOLDS)


def _rand_words(rng, lo, hi):
    n = int(rng.integers(lo, hi + 1))
    return [VOCAB[int(i)] for i in rng.integers(0, len(VOCAB), n)]


def _record_line(src, trg, src_line, tgt_line):
    return json.dumps({"src": src, "trg": trg, "src_line": src_line,
                       "tgt_line": tgt_line}, ensure_ascii=False)


def _token_contrib(token: str) -> np.ndarray:
    h = fnv1a64(token.encode("utf-8"))
    bits = np.array([(h >> b) & 1 for b in range(64)], dtype=np.int64)
    return 2 * bits - 1


def _build_cluster(rng) -> list[tuple[str, str]]:
    """Four records whose signatures sit at pairwise hamming distance
    1 or 2: one-token substitutions of a 20+20-token base, each flipping
    exactly one distinct signature bit."""
    while True:
        src_tokens = _rand_words(rng, 20, 20)
        tgt_tokens = _rand_words(rng, 20, 20)
        if len(set(src_tokens + tgt_tokens)) != 40:
            continue  # need distinct tokens so substitution algebra is exact
        acc = np.zeros(64, dtype=np.int64)
        for tok in src_tokens + tgt_tokens:
            acc += _token_contrib(tok)
        base_sig = simhash64(src_tokens + tgt_tokens)

        variants: list[tuple[int, list[str]]] = []  # (flipped bit, src tokens)
        used_bits: set[int] = set()
        candidates = rng.integers(0, len(VOCAB), size=4000)
        ci = 0
        for pos in range(20):
            if len(variants) == 3:
                break
            old_contrib = _token_contrib(src_tokens[pos])
            for _ in range(200):
                if ci >= len(candidates) or len(variants) == 3:
                    break
                word = VOCAB[int(candidates[ci])]
                ci += 1
                if word in src_tokens or word in tgt_tokens:
                    continue
                new_acc = acc - old_contrib + _token_contrib(word)
                new_sig = int.from_bytes(
                    np.packbits((new_acc > 0).astype(np.uint8),
                                bitorder="little").tobytes(), "little")
                diff = base_sig ^ new_sig
                if diff.bit_count() != 1:
                    continue
                bit = diff.bit_length() - 1
                if bit in used_bits:
                    continue
                used_bits.add(bit)
                new_src = list(src_tokens)
                new_src[pos] = word
                variants.append((bit, new_src))
        if len(variants) < 3:
            continue
        rows = [(" ".join(src_tokens), " ".join(tgt_tokens))]
        rows.extend((" ".join(v_src), " ".join(tgt_tokens)) for _, v_src in variants)
        return rows


def build_fixture(seed: int = FIXTURE_SEED) -> FixtureBundle:
    rng = np.random.default_rng(seed)
    config = RefineryConfig()

    # role, src, trg, src_line, tgt_line in eventual parsed order
    rows: list[tuple[str, str, str, str, str]] = []

    for _ in range(N_GOOD_EN):
        rows.append(("good_en", "en", "de",
                     " ".join(_rand_words(rng, 6, 14)),
                     " ".join(_rand_words(rng, 6, 14))))
    for _ in range(N_ZH):
        n_zh = int(rng.integers(8, 17))
        zh = "".join(HAN[int(i)] for i in rng.integers(0, len(HAN), n_zh))
        rows.append(("good_zh", "zh", "en", zh,
                     " ".join(_rand_words(rng, 6, 14))))
    for cluster in range(N_CLUSTERS):
        for i, (src_line, tgt_line) in enumerate(_build_cluster(rng)):
            role = f"cluster{cluster}_{'base' if i == 0 else 'v%d' % i}"
            rows.append((role, "en", "de", src_line, tgt_line))

    # mark duplicate sources so victim selection below avoids them: after
    # shuffling, either member of an exact pair may be the one dedup drops
    dup_sources = rng.choice(N_GOOD_EN, size=N_DUP, replace=False)
    for src_idx in dup_sources:
        _, src, trg, src_line, tgt_line = rows[int(src_idx)]
        rows[int(src_idx)] = ("good_dupsrc", src, trg, src_line, tgt_line)
        rows.append(("dup", src, trg, src_line, tgt_line))

    for _ in range(N_SHORT):
        rows.append(("short", "en", "de", VOCAB[int(rng.integers(0, len(VOCAB)))],
                     " ".join(_rand_words(rng, 6, 10))))
    for _ in range(N_MISMATCH):
        rows.append(("mismatch", "en", "de",
                     " ".join(_rand_words(rng, 3, 3)),
                     " ".join(_rand_words(rng, 11, 20))))

    order = rng.permutation(len(rows))
    rows = [rows[int(i)] for i in order]
    roles = [r[0] for r in rows]

    _verify_conflict_structure(rows, config)

    # langid and quality victims drawn from plain good_en records that are
    # not dedup victims (good records always survive dedup by construction)
    good_en_seqs = [seq for seq, role in enumerate(roles) if role == "good_en"]
    zh_seqs = [seq for seq, role in enumerate(roles) if role == "good_zh"]
    wrong_lang = set(good_en_seqs[:N_WRONG_LANG])
    lowconf = set(good_en_seqs[N_WRONG_LANG:N_WRONG_LANG + N_LOWCONF])
    highloss = set(good_en_seqs[N_WRONG_LANG + N_LOWCONF:
                                N_WRONG_LANG + N_LOWCONF + N_HIGHLOSS_EN])
    highloss |= set(zh_seqs[:N_HIGHLOSS_ZH])
    boundary = set(good_en_seqs[-5:])  # loss exactly at tau: must survive

    langid_lines = []
    quality_lines = []
    for seq, (role, src, trg, src_line, tgt_line) in enumerate(rows):
        if seq in wrong_lang:
            langid_lines.append(f"{2 * seq}\tfr\t0.97")
        elif seq in lowconf:
            langid_lines.append(f"{2 * seq}\t{src}\t0.4")
        else:
            langid_lines.append(f"{2 * seq}\t{src}\t0.95")
        langid_lines.append(f"{2 * seq + 1}\t{trg}\t0.95")
        if seq in highloss:
            quality_lines.append(f"{seq}\t10.0")
        elif seq in boundary:
            quality_lines.append(f"{seq}\t9.0")
        else:
            quality_lines.append(f"{seq}\t4.0")

    dev_lines = []
    dev_sidecar_lines = []
    dev_id = 0
    for src, trg in (("en", "de"), ("zh", "en")):
        for loss in range(1, 11):
            if src == "zh":
                line = "".join(HAN[int(i)] for i in rng.integers(0, len(HAN), 10))
            else:
                line = " ".join(_rand_words(rng, 6, 10))
            dev_lines.append(_record_line(src, trg, line,
                                          " ".join(_rand_words(rng, 6, 10))) + "\n")
            dev_sidecar_lines.append(f"{dev_id}\t{float(loss)!r}")
            dev_id += 1

    lines = [_record_line(src, trg, s, t) + "\n"
             for _, src, trg, s, t in rows]
    malformed = [
        "{not json at all\n",
        '{"src":"en","trg":"de","src_line":"missing target"}\n',
        '{"src":"en","trg":"en","src_line":"same","tgt_line":"langs"}\n',
        '{"src":"ENG","trg":"de","src_line":"bad","tgt_line":"code"}\n',
        '["a","list","not","an","object"]\n',
        '{"src":"en","trg":"de","src_line":42,"tgt_line":"not text"}\n',
        "\x7b\x7d\n",  # object missing every key
        '{"trg":"de","src_line":"x","tgt_line":"y"}\n',
        "null\n",
        '{"src":"e","trg":"de","src_line":"short code","tgt_line":"y"}\n',
    ]
    assert len(malformed) == EXPECTED_MALFORMED
    insert_at = np.linspace(0, len(lines), num=len(malformed), endpoint=False).astype(int)
    for offset, (pos, bad) in enumerate(zip(insert_at, malformed)):
        lines.insert(int(pos) + offset, bad)
    assert len(lines) == 1000

    return FixtureBundle(
        lines=lines,
        langid_sidecar="\n".join(langid_lines) + "\n",
        quality_sidecar="\n".join(quality_lines) + "\n",
        dev_lines=dev_lines,
        dev_sidecar="\n".join(dev_sidecar_lines) + "\n",
    )


def _verify_conflict_structure(rows, config: RefineryConfig) -> None:
    """The golden dedup count (35 = 30 exact dups + 5 cluster spillover)
    is valid only if the generated corpus has exactly the planned
    conflict structure; re-derive it and fail loudly otherwise."""
    sigs_by_pair: dict[tuple[str, str], list[tuple[str, int]]] = {}
    for role, src, trg, src_line, tgt_line in rows:
        if role in ("short", "mismatch"):
            continue  # dropped before dedup
        if src == "zh":
            tokens = list(src_line) + tgt_line.split()
        else:
            tokens = src_line.split() + tgt_line.split()
        sigs_by_pair.setdefault((src, trg), []).append((role, simhash64(tokens)))

    for pair, entries in sigs_by_pair.items():
        for i in range(len(entries)):
            for j in range(i + 1, len(entries)):
                role_i, sig_i = entries[i]
                role_j, sig_j = entries[j]
                d = hamming(sig_i, sig_j)
                same_cluster = (role_i.startswith("cluster") and
                                role_j.startswith("cluster") and
                                role_i.split("_")[0] == role_j.split("_")[0])
                dup_pair = ("dup" in (role_i, role_j)) and d == 0
                if same_cluster:
                    if not 1 <= d <= config.hamming_radius:
                        raise AssertionError(
                            f"cluster pair {role_i}/{role_j} at distance {d}")
                elif dup_pair:
                    pass
                elif d <= config.hamming_radius:
                    raise AssertionError(
                        f"unplanned conflict {role_i}/{role_j} at distance {d}")
