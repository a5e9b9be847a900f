#!/usr/bin/env python3
"""Writes the bundled EmpatheticDialogues-format test corpora.

small/      500 train, 80 valid, 80 test conversations. Each opening user
            turn carries a cue word for the conversation's emotion and the
            agent replies follow emotion-specific templates, so both the
            emotion and the replies are learnable from a few hundred
            dialogues.
fixture20/  20 hand-written conversations with edge cases (odd turn
            counts, escaped commas, out-of-order and malformed rows) and a
            manifest of the expected per-conversation sample counts.

Deterministic: rerunning reproduces the files byte for byte.
"""

import os
import random
import sys

HEADER = "conv_id,utterance_idx,context,prompt,speaker_idx,utterance,selfeval,tags\n"

CUES = {
    "afraid": ["scared", "frightened", "fearful"],
    "angry": ["angry", "mad", "enraged"],
    "annoyed": ["annoyed", "irritated", "bugged"],
    "anticipating": ["waiting", "counting", "expecting"],
    "anxious": ["anxious", "nervous", "worried"],
    "apprehensive": ["uneasy", "hesitant", "unsure"],
    "ashamed": ["ashamed", "humiliated", "shameful"],
    "caring": ["caring", "looking", "helping"],
    "confident": ["confident", "certain", "assured"],
    "content": ["content", "satisfied", "peaceful"],
    "devastated": ["devastated", "crushed", "heartbroken"],
    "disappointed": ["disappointed", "letdown", "deflated"],
    "disgusted": ["disgusted", "grossed", "revolted"],
    "embarrassed": ["embarrassed", "awkward", "blushing"],
    "excited": ["excited", "thrilled", "pumped"],
    "faithful": ["faithful", "loyal", "devoted"],
    "furious": ["furious", "livid", "seething"],
    "grateful": ["grateful", "thankful", "blessed"],
    "guilty": ["guilty", "remorseful", "sorry"],
    "hopeful": ["hopeful", "optimistic", "wishing"],
    "impressed": ["impressed", "amazed", "wowed"],
    "jealous": ["jealous", "envious", "resentful"],
    "joyful": ["joyful", "happy", "cheerful"],
    "lonely": ["lonely", "isolated", "alone"],
    "nostalgic": ["nostalgic", "remembering", "reminiscing"],
    "prepared": ["prepared", "ready", "organized"],
    "proud": ["proud", "accomplished", "honored"],
    "sad": ["sad", "down", "blue"],
    "sentimental": ["sentimental", "touched", "moved"],
    "surprised": ["surprised", "shocked", "stunned"],
    "terrified": ["terrified", "petrified", "horrified"],
    "trusting": ["trusting", "relying", "counting on"],
}

POSITIVE = {"confident", "joyful", "grateful", "impressed", "proud", "excited", "trusting",
            "hopeful", "faithful", "prepared", "content", "surprised", "caring"}

EVENTS = [
    "my sister came to visit", "i got the new job", "my car broke down", "the dog ran away",
    "i moved to a new city", "my exam results came back", "the storm hit our town",
    "my friend forgot my birthday", "i saw an old photo", "my boss called me in",
    "the neighbors threw a party", "i finished the marathon", "my flight got cancelled",
    "the baby was born", "i cooked dinner for my parents", "my team won the game",
    "i lost my wallet", "we adopted a kitten", "the doctor called back",
    "my brother borrowed my car", "i started a new class", "the rent went up",
]

OPENERS = ["i felt so {cue} when {event} .", "i was {cue} because {event} .",
           "honestly i am {cue} , {event} .", "last week {event} and i felt {cue} ."]

FOLLOWUPS = ["yes , it was a big deal for me .", "yeah , i keep thinking about it .",
             "i know , i did not expect it .", "it really was , thanks for asking ."]

REPLIES = {
    "afraid": ["that sounds scary , are you safe now ?", "oh no , that must have been frightening ."],
    "angry": ["i would be angry too , that is not fair .", "that would make me mad as well ."],
    "annoyed": ["that sounds so annoying .", "ugh , i would be annoyed too ."],
    "anticipating": ["how long do you have to wait ?", "i hope the wait goes by fast ."],
    "anxious": ["try to take a deep breath , it will be ok .", "that sounds stressful , i hope it works out ."],
    "apprehensive": ["it is normal to feel unsure about that .", "take your time before you decide ."],
    "ashamed": ["everyone makes mistakes , do not be too hard on yourself .", "it happens to all of us ."],
    "caring": ["that is very kind of you .", "you are a good person for doing that ."],
    "confident": ["you sound ready , good luck !", "i am sure you will do great ."],
    "content": ["that sounds really nice and relaxing .", "it is good to feel at peace ."],
    "devastated": ["i am so sorry for your loss .", "that is heartbreaking , i am so sorry ."],
    "disappointed": ["that is a shame , maybe next time .", "sorry it did not work out ."],
    "disgusted": ["ew , that is gross .", "yuck , i would be disgusted too ."],
    "embarrassed": ["that is so embarrassing , but people forget fast .", "haha , we all have moments like that ."],
    "excited": ["that is so exciting , have fun !", "wow , i am excited for you !"],
    "faithful": ["that kind of loyalty is rare .", "it is great that you stayed true ."],
    "furious": ["i would be furious too , that is outrageous .", "wow , that is infuriating ."],
    "grateful": ["it is nice to have people like that .", "that is something to be thankful for ."],
    "guilty": ["you could apologize , i am sure they will understand .", "do not beat yourself up over it ."],
    "hopeful": ["i hope it works out for you .", "fingers crossed for you !"],
    "impressed": ["that is really impressive .", "wow , that is amazing ."],
    "jealous": ["it is normal to feel a little jealous .", "your time will come too ."],
    "joyful": ["that is wonderful news !", "i am so happy for you !"],
    "lonely": ["i am sorry you feel alone , maybe call a friend ?", "being lonely is hard , i am here ."],
    "nostalgic": ["those were the good old days .", "it is nice to remember those times ."],
    "prepared": ["good planning makes everything easier .", "sounds like you are ready for it ."],
    "proud": ["you should be proud of that !", "congratulations , that is a big achievement ."],
    "sad": ["i am sorry , that is really sad .", "that is so sad , i hope you feel better ."],
    "sentimental": ["that is so sweet and touching .", "those moments mean a lot ."],
    "surprised": ["wow , i did not see that coming !", "what a surprise !"],
    "terrified": ["that is terrifying , i would be petrified .", "oh my , that sounds horrifying ."],
    "trusting": ["it is good to have someone you can rely on .", "trust is important ."],
}

CLOSERS = {
    True: ["that is great , enjoy it !", "i am glad things are going well ."],
    False: ["i hope things get better soon .", "hang in there , it will pass ."],
}

LENGTHS = [2] * 20 + [3] * 10 + [4] * 50 + [5] * 8 + [6] * 12


def esc(text):
    return text.replace(",", "_comma_")


def conversation(rng, emotion):
    cue = rng.choice(CUES[emotion])
    event = rng.choice(EVENTS)
    turns = [rng.choice(OPENERS).format(cue=cue, event=event), rng.choice(REPLIES[emotion])]
    pos = emotion in POSITIVE
    while len(turns) < rng.choice(LENGTHS):
        if len(turns) % 2 == 0:
            turns.append(rng.choice(FOLLOWUPS))
        else:
            turns.append(rng.choice(CLOSERS[pos]))
    return turns


def rows(conv_id, emotion, turns):
    out = []
    for i, t in enumerate(turns, start=1):
        out.append(f"{conv_id},{i},{emotion},{esc(turns[0])},{i % 2},{esc(t)},,\n")
    return out


def write_small(root, seed=20240501):
    rng = random.Random(seed)
    labels = sorted(CUES)
    sizes = {"train": 500, "valid": 80, "test": 80}
    n = 0
    os.makedirs(root, exist_ok=True)
    for split, size in sizes.items():
        with open(os.path.join(root, f"{split}.csv"), "w") as f:
            f.write(HEADER)
            for i in range(size):
                emotion = labels[(i + rng.randrange(32)) % 32] if i >= 32 else labels[i]
                f.write("".join(rows(f"hit:{n}_conv:{2 * n}", emotion, conversation(rng, emotion))))
                n += 1


FIXTURE = {
    "train": [
        ("f:0", "joyful", ["I won the lottery!", "That is amazing_comma_ congrats!"]),
        ("f:1", "sad", ["My cat died.", "I am so sorry.", "Thanks.", "Take care."]),
        ("f:2", "afraid", ["A noise woke me up.", "Was it a burglar?", "It was the wind."]),
        ("f:3", "proud", ["My son graduated.", "Congratulations!", "He worked hard.", "You must be proud.",
                          "I am.", "Well deserved."]),
        ("f:4", "lonely", ["Nobody called me today."]),
        ("f:5", "angry", ["Someone scratched my car.", "That is awful.", "I am furious.", "I understand.",
                          "Cops were useless."]),
        ("f:6", "grateful", ["My friend helped me move.", "Good friend!"]),
        ("f:7", "anxious", ["Big interview tomorrow.", "You will do fine.", "I hope so.", "Good luck."]),
        ("f:8", "nostalgic", ["Found my old diary.", "Fun!", "So many memories.", "Cherish them."]),
        ("f:9", "surprised", ["They threw me a party.", "How nice!"]),
        ("f:10", "guilty", ["I ate my roommate's cake.", "Oops.", "I feel bad.", "Buy a new one.",
                            "I will.", "Good plan."]),
        ("f:11", "content", ["Quiet evening with tea.", "Sounds lovely.", "It was."]),
        ("f:12", "terrified", ["The plane shook a lot.", "Turbulence is scary.", "I held my breath.",
                               "Glad you landed."]),
        ("f:13", "excited", ["Concert tonight!", "Have fun!"]),
    ],
    "valid": [
        ("f:14", "disgusted", ["Found a hair in my soup.", "Gross!", "I sent it back.", "Good."]),
        ("f:15", "hopeful", ["I applied for a grant.", "Fingers crossed."]),
        ("f:16", "jealous", ["My coworker got promoted.", "You will get there.", "Maybe.", "Keep going.",
                             "Thanks."]),
    ],
    "test": [
        ("f:17", "embarrassed", ["I tripped on stage.", "Oh no!", "Everyone laughed.", "It happens."]),
        ("f:18", "caring", ["I looked after my neighbor.", "That is kind."]),
        ("f:19", "devastated", ["We lost the house.", "I am so sorry.", "It was everything.", "Stay strong.",
                                "Thank you.", "Anytime."]),
    ],
}

# conversation id -> (utterances, samples), written by hand.
FIXTURE_MANIFEST = {
    "f:0": (2, 1), "f:1": (4, 2), "f:2": (3, 1), "f:3": (6, 3), "f:4": (1, 0),
    "f:5": (5, 2), "f:6": (2, 1), "f:7": (4, 2), "f:8": (4, 2), "f:9": (2, 1),
    "f:10": (6, 3), "f:11": (3, 1), "f:12": (4, 2), "f:13": (2, 1), "f:14": (4, 2),
    "f:15": (2, 1), "f:16": (5, 2), "f:17": (4, 2), "f:18": (2, 1), "f:19": (6, 3),
}


def write_fixture(root):
    os.makedirs(root, exist_ok=True)
    for split, convs in FIXTURE.items():
        lines = []
        for conv_id, emotion, turns in convs:
            assert FIXTURE_MANIFEST[conv_id][0] == len(turns), conv_id
            lines.extend(rows(conv_id, emotion, turns))
        if split == "train":
            # Rows of f:2 out of order and two malformed rows.
            i = next(k for k, l in enumerate(lines) if l.startswith("f:2,1,"))
            lines[i], lines[i + 2] = lines[i + 2], lines[i]
            lines.insert(3, "this row is malformed\n")
            lines.append("f:99,not-a-number,sad,p,1,hello,,\n")
        with open(os.path.join(root, f"{split}.csv"), "w") as f:
            f.write(HEADER)
            f.writelines(lines)
    with open(os.path.join(root, "manifest.csv"), "w") as f:
        f.write("split,conv_id,utterances,samples\n")
        for split, convs in FIXTURE.items():
            for conv_id, _, _ in convs:
                u, s = FIXTURE_MANIFEST[conv_id]
                f.write(f"{split},{conv_id},{u},{s}\n")


if __name__ == "__main__":
    out = sys.argv[1] if len(sys.argv) > 1 else os.path.join(
        os.path.dirname(__file__), "..", "crates", "core", "tests", "data")
    write_small(os.path.join(out, "small"))
    write_fixture(os.path.join(out, "fixture20"))
