#!/usr/bin/env python3
"""Regenerates the bundled sample data under data/.

Outputs are deterministic for a given seed:
  data/english_sample.txt   ~10k synthetic English sentences
  data/lexicon.tsv          word \t lemma \t comma-separated synonyms
  data/smoke/*.src|*.tgt    small English -> pig-latin parallel corpus
"""
import random
from pathlib import Path

SEED = 20240611
ROOT = Path(__file__).resolve().parent.parent / "data"

# synonym groups of noun lemmas
NOUN_GROUPS = [
    ["house", "home", "dwelling"], ["car", "automobile"], ["road", "street", "avenue"],
    ["child", "kid"], ["man", "guy"], ["woman", "lady"], ["doctor", "physician"],
    ["teacher", "instructor", "tutor"], ["city", "town"], ["forest", "woods"],
    ["river", "stream", "creek"], ["hill", "mound"], ["stone", "rock"], ["gift", "present"],
    ["trip", "journey", "voyage"], ["job", "task", "chore"], ["shop", "store"],
    ["bag", "sack"], ["boat", "ship", "vessel"], ["picture", "image", "photo"],
    ["answer", "reply", "response"], ["idea", "notion", "concept"], ["friend", "companion"],
    ["camp", "tent"], ["story", "tale"], ["meal", "dinner"], ["error", "mistake"],
    ["garden", "yard"], ["hat", "cap"], ["lamp", "light"], ["bulb", "globe"],
    ["student", "pupil"], ["chair", "seat"], ["path", "trail", "track"], ["letter", "note"],
    ["village", "hamlet"], ["ocean", "sea"], ["coat", "jacket"], ["noise", "sound"],
    ["king", "ruler", "monarch"], ["dog", "hound"], ["cat", "kitten"], ["bird", "fowl"],
]
NOUNS_SOLO = ["table", "window", "door", "book", "apple", "bread", "water", "tree", "flower",
              "phone", "computer", "paper", "market", "school", "office", "bridge", "train",
              "horse", "song", "game", "box", "key", "field", "farmer", "baker", "cloud",
              "mountain", "island", "window", "kitchen", "wall", "floor", "ticket", "clock"]
PLURAL_IRREGULAR = {"child": "children", "man": "men", "woman": "women", "mouse": "mice",
                    "sheep": "sheep", "fish": "fish"}

VERB_GROUPS = [
    ["take", "grab", "seize"], ["see", "notice", "spot"], ["make", "build", "create"],
    ["walk", "stroll", "wander"], ["run", "sprint", "dash"], ["speak", "talk"],
    ["look", "glance", "peek"], ["buy", "purchase"], ["begin", "start"], ["finish", "complete", "end"],
    ["help", "assist", "aid"], ["pour", "spill"], ["tour", "visit"], ["carry", "bring"],
    ["throw", "toss", "hurl"], ["fix", "repair", "mend"], ["want", "desire"], ["jump", "leap", "hop"],
    ["shout", "yell", "scream"], ["choose", "pick", "select"], ["close", "shut"], ["hide", "conceal"],
    ["find", "discover"], ["like", "enjoy"], ["cook", "bake"], ["clean", "wash"], ["open", "unlock"],
]
VERBS_SOLO = ["paint", "read", "write", "sing", "play", "watch", "follow", "call", "move", "push",
              "pull", "fill", "learn", "teach", "sell", "send", "keep", "drive"]
IRREGULAR = {
    "take": ("took",), "see": ("saw",), "make": ("made",), "run": ("ran",), "speak": ("spoke",),
    "buy": ("bought",), "begin": ("began",), "bring": ("brought",), "throw": ("threw",),
    "choose": ("chose",), "hide": ("hid",), "find": ("found",), "read": ("read",), "write": ("wrote",),
    "sing": ("sang",), "sell": ("sold",), "send": ("sent",), "keep": ("kept",), "drive": ("drove",),
    "teach": ("taught",), "build": ("built",), "leap": ("leapt",), "seize": None, "spot": None,
}

ADJ_GROUPS = [
    ["big", "large", "huge"], ["small", "little", "tiny"], ["fast", "quick", "rapid"],
    ["happy", "glad", "cheerful"], ["sad", "unhappy", "gloomy"], ["old", "ancient", "aged"],
    ["new", "fresh", "novel"], ["bright", "shiny", "vivid"], ["quiet", "silent", "calm"],
    ["angry", "mad", "furious"], ["smart", "clever", "bright"], ["easy", "simple"],
    ["hard", "difficult", "tough"], ["pretty", "lovely", "beautiful"], ["cold", "chilly", "icy"],
    ["warm", "hot"], ["strange", "odd", "weird"], ["rich", "wealthy"], ["wet", "damp", "moist"],
]
ADJ_SOLO = ["red", "blue", "green", "wooden", "early", "late", "empty", "full", "heavy", "light"]
ADV_GROUPS = [["quickly", "rapidly", "swiftly"], ["slowly", "gradually"], ["quietly", "silently"],
              ["often", "frequently"], ["again", "once"]]
ADV_SOLO = ["today", "yesterday", "soon", "together", "outside"]

PREPS = ["near", "behind", "under", "over", "into", "from", "with", "across", "beside", "around"]
DETS = ["the", "a", "this", "that", "every", "my", "our", "his", "her", "their"]
PRONS = ["she", "he", "they", "we", "i", "you"]


def plural(n):
    if n in PLURAL_IRREGULAR:
        return PLURAL_IRREGULAR[n]
    if n.endswith(("s", "x", "ch", "sh")):
        return n + "es"
    if n.endswith("y") and n[-2] not in "aeiou":
        return n[:-1] + "ies"
    if n.endswith("f"):
        return n[:-1] + "ves"
    return n + "s"


def third(v):
    if v.endswith(("s", "x", "ch", "sh", "o")):
        return v + "es"
    if v.endswith("y") and v[-2] not in "aeiou":
        return v[:-1] + "ies"
    return v + "s"


def double_final(v):
    return (len(v) >= 3 and v[-1] not in "aeiouwxy" and v[-2] in "aeiou" and v[-3] not in "aeiou"
            and v not in {"open", "visit", "enter", "follow", "wander", "shout", "pour", "tour"})


def ing(v):
    if v.endswith("ie"):
        return v[:-2] + "ying"
    if v.endswith("e") and not v.endswith("ee"):
        return v[:-1] + "ing"
    if double_final(v):
        return v + v[-1] + "ing"
    return v + "ing"


def past(v):
    irr = IRREGULAR.get(v)
    if irr:
        return irr[0]
    if v.endswith("e"):
        return v + "d"
    if v.endswith("y") and v[-2] not in "aeiou":
        return v[:-1] + "ied"
    if double_final(v):
        return v + v[-1] + "ed"
    return v + "ed"


def build_lexicon():
    entries = {}  # word -> (lemma, set(syns))

    def add(word, lemma):
        entries.setdefault(word, (lemma, set()))

    def link(forms_a, forms_b):
        for a, b in zip(forms_a, forms_b):
            if a != b and a in entries and b in entries:
                entries[a][1].add(b)
                entries[b][1].add(a)

    def noun_forms(n):
        return [n, plural(n)]

    def verb_forms(v):
        return [v, third(v), ing(v), past(v)]

    nouns = [n for g in NOUN_GROUPS for n in g] + NOUNS_SOLO
    verbs = [v for g in VERB_GROUPS for v in g] + VERBS_SOLO
    adjs = [a for g in ADJ_GROUPS for a in g] + ADJ_SOLO
    advs = [a for g in ADV_GROUPS for a in g] + ADV_SOLO
    for n in nouns:
        for f in noun_forms(n):
            add(f, n)
    for v in verbs:
        for f in verb_forms(v):
            add(f, v)
    for a in adjs + advs:
        add(a, a)
    for g in NOUN_GROUPS:
        for a in g:
            for b in g:
                link(noun_forms(a), noun_forms(b))
    for g in VERB_GROUPS:
        for a in g:
            for b in g:
                link(verb_forms(a), verb_forms(b))
    for g in ADJ_GROUPS + ADV_GROUPS:
        for a in g:
            for b in g:
                link([a], [b])
    return entries, sorted(set(nouns)), sorted(set(verbs)), sorted(set(adjs)), sorted(set(advs))


def zipf_choice(rng, items):
    weights = [1.0 / (i + 2) ** 0.8 for i in range(len(items))]
    return rng.choices(items, weights=weights, k=1)[0]


def sentence(rng, nouns, verbs, adjs, advs):
    def np_():
        det = rng.choice(DETS)
        noun = zipf_choice(rng, nouns)
        if rng.random() < 0.3:
            noun = plural(noun)
            det = rng.choice(["the", "some", "many", "these", "those", "our", "their"])
        if rng.random() < 0.45:
            return f"{det} {zipf_choice(rng, adjs)} {noun}"
        return f"{det} {noun}"

    def vp():
        v = zipf_choice(rng, verbs)
        form = rng.choice([past(v), third(v), "is " + ing(v), "will " + v, past(v)])
        return form

    t = rng.randrange(6)
    if t == 0:
        s = f"{np_()} {vp()} {np_()}"
    elif t == 1:
        s = f"{np_()} {vp()} {rng.choice(PREPS)} {np_()}"
    elif t == 2:
        s = f"{rng.choice(PRONS)} {vp()} {np_()} {zipf_choice(rng, advs)}"
    elif t == 3:
        s = f"{rng.choice(PRONS)} {vp()} {np_()} and {np_()} {rng.choice(PREPS)} {np_()}"
    elif t == 4:
        s = f"did {np_()} {zipf_choice(rng, verbs)} {np_()}"
        return s[0].upper() + s[1:] + " ?"
    else:
        s = f"{np_()} {vp()} {zipf_choice(rng, advs)} , and {rng.choice(PRONS)} {vp()} {np_()}"
    return s[0].upper() + s[1:] + rng.choice([" .", " .", " .", " !"])


def pig_latin(word):
    if not word.isalpha():
        return word
    lower = word.lower()
    i = 0
    while i < len(lower) and lower[i] not in "aeiou":
        i += 1
    out = lower[i:] + lower[:i] + ("ay" if i else "way")
    return out.capitalize() if word[0].isupper() else out


def main():
    rng = random.Random(SEED)
    entries, nouns, verbs, adjs, advs = build_lexicon()
    rng.shuffle(nouns)
    rng.shuffle(verbs)
    rng.shuffle(adjs)
    rng.shuffle(advs)
    sents = [sentence(rng, nouns, verbs, adjs, advs) for _ in range(10000)]
    ROOT.mkdir(parents=True, exist_ok=True)
    (ROOT / "english_sample.txt").write_text("\n".join(sents) + "\n")
    with open(ROOT / "lexicon.tsv", "w") as f:
        for word in sorted(entries):
            lemma, syns = entries[word]
            f.write(f"{word}\t{lemma}\t{','.join(sorted(syns))}\n")

    short = [s for s in sents if len(s) <= 48]
    smoke = ROOT / "smoke"
    smoke.mkdir(exist_ok=True)
    splits = {"train": short[:400], "valid": short[400:440], "test": short[440:480]}
    for name, rows in splits.items():
        (smoke / f"{name}.src").write_text("\n".join(rows) + "\n")
        (smoke / f"{name}.tgt").write_text("\n".join(" ".join(pig_latin(w) for w in r.split()) for r in rows) + "\n")


if __name__ == "__main__":
    main()
