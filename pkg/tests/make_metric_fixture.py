"""Regenerate tests/data/metric_cases.json from the brute-force oracles.

Run from the repository root:

    python3 tests/make_metric_fixture.py

The fixture freezes oracle-derived expected values for 20 text cases; the
test suite compares the package implementations against these numbers (and
re-derives them live) at the pinned tolerances.
"""

import json
import sys
from pathlib import Path

sys.path.insert(0, str(Path(__file__).resolve().parent))

from oracles import bleu_weighted_oracle, meteor_oracle, rouge_l_oracle


CASES = [
    # (candidate, [references])
    ("a quiet piano melody drifts over soft rain",
     ["a quiet piano melody drifts over soft rain"]),
    ("loud distorted guitars and screaming vocals",
     ["gentle harp arpeggios in a calm hall"]),
    ("piano",
     ["a long meditative piano improvisation recorded live"]),
    ("the song builds and builds and builds into a wall of shimmering noise",
     ["the song builds into noise"]),
    ("the the the the the",
     ["the cat sat on the mat"]),
    ("drums bass guitar keys vocals",
     ["vocals keys guitar bass drums"]),
    ("a fast dance track with heavy bass",
     ["a fast dance track with a heavy bassline",
      "fast dance music with heavy bass",
      "an uptempo club track"]),
    ("wow! what a performance: strings, brass, and choir.",
     ["what a performance! strings, brass and choir"]),
    ("a slow sad violin piece in a minor key",
     ["a slow melancholic cello piece in a minor key"]),
    ("bright synth arpeggios",
     ["bright synth arpeggios pulse over a steady four on the floor beat"]),
    ("ends with a long fading drone",
     ["the track opens quietly and ends with a long fading drone"]),
    ("plucked strings over hand percussion",
     ["", "plucked strings over quiet hand percussion"]),
    ("...", ["a short burst of static"]),
    ("an energetic brass band marches through a festive street parade",
     ["an energetic brass band plays during a street parade",
      "a brass band marches through a festival"]),
    ("call and response call and response between singer and crowd",
     ["a call and response pattern between the singer and the crowd"]),
    ("soft mallets ring out over a warm pad",
     ["soft mallets ring gently out over a warm pad"]),
    ("RAIN and THUNDER with distant WIND CHIMES",
     ["rain and thunder with distant wind chimes"]),
    ("a 12 bar blues at 120 bpm with a 4 4 shuffle",
     ["a 12 bar blues around 120 bpm in a shuffle feel"]),
    ("one small two medium three large four",
     ["one two three four"]),
    ("l'orchestre joue une valse lente et triste",
     ["l'orchestre joue une valse triste et lente"]),
]


def main():
    from tuneqa.metrics import tokenize

    cases = []
    for candidate, references in CASES:
        cand = tokenize(candidate)
        refs = [tokenize(r) for r in references]
        cases.append({
            "candidate": candidate,
            "references": references,
            "expected": {
                "bleu_weighted": bleu_weighted_oracle(cand, refs),
                "rouge_l": rouge_l_oracle(cand, refs),
                "meteor": meteor_oracle(cand, refs),
            },
        })
    out = Path(__file__).resolve().parent / "data" / "metric_cases.json"
    out.parent.mkdir(parents=True, exist_ok=True)
    with open(out, "w", encoding="utf-8") as fh:
        json.dump(cases, fh, indent=2, ensure_ascii=False)
        fh.write("\n")
    print(f"wrote {len(cases)} cases to {out}")


if __name__ == "__main__":
    main()
