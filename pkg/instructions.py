# BSD 3-Clause License
#
# Copyright (c) 2025, the video-action-dit authors
# All rights reserved. See LICENSE for the full license text.

"""
Instruction templates and the fixed-length word-level tokenizer
"""

from dataclasses import dataclass

import numpy as np

PAD = "<pad>"
UNK = "<unk>"
PAD_ID = 0
UNK_ID = 1
L_TEXT = 16

COLORS = ("red", "green", "blue", "yellow", "purple", "orange", "cyan", "pink")
SHAPE_WORDS = ("disk", "square", "triangle", "bottle", "sponge", "bowl", "plate")

# first template of every skill is the canonical phrasing
TEMPLATES = {
    "pick_place": ("pick up the {color} {shape} and place it on the {target_color} plate",
                   "put the {color} {shape} on the {target_color} plate"),
    "stack": ("stack the {color} {shape} on the {target_color} {target_shape}",
              "place the {color} {shape} on top of the {target_color} {target_shape}"),
    "move_near": ("move the {color} {shape} near the {target_color} {target_shape}",
                  "slide the {color} {shape} next to the {target_color} {target_shape}"),
    "topple": ("topple the {color} bottle",
               "knock over the {color} bottle"),
    "wipe": ("wipe the table with the {color} sponge",
             "clean the dirt with the {color} sponge"),
    "take_out": ("take the {color} {shape} out of the {target_color} bowl",
                 "remove the {color} {shape} from the {target_color} bowl"),
}


@dataclass(frozen=True)
class Vocab:
    words: tuple                    # index = token id

    def __post_init__(self):
        object.__setattr__(self, "_ids", {w: i for i, w in enumerate(self.words)})

    def __len__(self):
        return len(self.words)

    def id(self, word):
        return self._ids.get(word, UNK_ID)

    def save(self, path):
        with open(path, "w", encoding="utf-8") as out_file:
            for i, word in enumerate(self.words):
                out_file.write(f"{word}\t{i}\n")

    @classmethod
    def load(cls, path):
        entries = []
        with open(path, encoding="utf-8") as in_file:
            for line in in_file:
                if line.strip():
                    word, index = line.rstrip("\n").split("\t")
                    entries.append((int(index), word))
        entries.sort()
        if [i for i, _ in entries] != list(range(len(entries))):
            raise ValueError(f"Invalid vocabulary file specified: {path}")
        return cls(tuple(w for _, w in entries))


def build_vocab(extra_words=()):
    """
    Closed vocabulary over every template word and attribute value, ids assigned in sorted order
    :param extra_words: additional words to include
    :return: Vocab with PAD=0 and UNK=1
    """
    words = set(COLORS) | set(SHAPE_WORDS) | set(extra_words)
    for phrasings in TEMPLATES.values():
        for template in phrasings:
            words.update(w for w in template.split() if not w.startswith("{"))
    return Vocab((PAD, UNK) + tuple(sorted(words)))


def instantiate_template(task, scene=None):
    """
    Fill the task's instruction template with colour and shape names
    :param task: TaskSpec (or any object with skill, scene, args, target, template)
    :param scene: optional scene overriding task.scene
    :return: lower-cased instruction
    """
    scene = {s.id: s for s in (scene if scene is not None else task.scene)}
    phrasings = TEMPLATES.get(task.skill)
    if phrasings is None:
        raise ValueError(f"Invalid skill specified: {task.skill}")
    arg = scene[task.args[0]]
    fields = {"color": arg.color, "shape": arg.shape}
    if task.target is not None:
        target = scene[task.target]
        fields.update(target_color=target.color, target_shape=target.shape)
    for key in ("color", "target_color"):
        if key in fields and fields[key] not in COLORS:
            raise ValueError(f"Invalid colour name specified: {fields[key]}")
    return phrasings[task.template % len(phrasings)].format(**fields).lower()


def tokenize(instruction, vocab, l_text=L_TEXT):
    """
    Whitespace split, vocabulary lookup, then truncate or pad to l_text
    :return: int32 array of length l_text
    """
    if l_text < 1:
        raise ValueError("Invalid l_text specified, must be at least 1!")
    ids = np.full(l_text, PAD_ID, dtype=np.int32)
    tokens = [vocab.id(w) for w in instruction.lower().split()][:l_text]
    ids[:len(tokens)] = tokens
    return ids


def detokenize(ids, vocab):
    return " ".join(vocab.words[i] for i in np.asarray(ids).tolist() if i != PAD_ID)
