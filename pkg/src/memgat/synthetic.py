"""Synthetic corpora with known ground truth.

``generate_car_corpus`` builds navigation and calendar scenarios in the style of an
in-car assistant: every scenario has a small knowledge base and a dialogue whose
turns enumerate question paraphrases over the scenario's entities.  Entity names
are unique across the corpus, so the sizes of the derived stage datasets follow
from the generator's template counts (see :func:`expected_stage_sizes`).

``generate_style_corpus`` builds profile-conditioned turns whose answer style
depends on the interlocutor's age (register) and gender (honorific).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .conditions import SlotLexicon
from .data import SUPERLATIVES, KnowledgeBase

LEXICON = SlotLexicon.default()

POI_TYPES = {
    "parking garage": "garage",
    "gas station": "gas",
    "coffee house": "coffee",
    "grocery store": "market",
    "rest stop": "rest area",
    "chinese restaurant": "kitchen",
}
NAME_WORDS = ["webster", "oak", "maple", "cedar", "elm", "pine", "willow", "birch", "lake", "hill", "park", "river"]
ADDRESS_NUMBERS = ["12", "48", "100", "215", "330", "471", "502", "689", "754", "918"]
ADDRESS_STREETS = ["main", "broad", "mill", "spring", "market", "bridge", "church", "station"]
ADDRESS_KINDS = ["street", "avenue", "road"]
TRAFFIC = ["heavy traffic", "no traffic", "moderate traffic", "road construction", "a car collision"]
ACTIVITIES = ["tennis", "yoga", "dentist", "doctor", "swimming", "football", "piano", "chess", "lab", "team"]
EVENT_KINDS = ["appointment", "meeting", "activity"]
DAYS = ["monday", "tuesday", "wednesday", "thursday", "friday", "saturday", "sunday"]
TIMES = ["9am", "10am", "11am", "1pm", "3pm", "5pm", "7pm"]
PARTIES = ["your sister", "your boss", "tom", "ana", "your father", "martha", "jon", "your mother"]

# question paraphrases and answer templates; paraphrase p is answered by template p % len(answers)
TEMPLATES: dict[str, tuple[list[str], list[str]]] = {
    "nearest": (
        [
            "can you find me the fastest route to a {poitype}",
            "give me directions to the nearest {poitype}",
            "where is the closest {poitype}",
            "find me the quickest way to a {poitype}",
            "which {poitype} is nearest to me",
        ],
        ["{poi} is {poidistance} away", "{poi} at {poidistance} is the nearest {poitype}"],
    ),
    "address": (
        [
            "what is the address of {poi}",
            "where is {poi} located",
            "give me the address for {poi}",
            "how do i get to {poi}",
            "tell me where {poi} is",
        ],
        ["{poi} is located at {poiaddress}", "the address of {poi} is {poiaddress}"],
    ),
    "traffic": (
        [
            "is there any traffic on the way to {poi}",
            "how is the traffic to {poi}",
            "what are the road conditions to {poi}",
            "will i hit traffic going to {poi}",
            "is the road to {poi} clear",
        ],
        ["there is {poitrafficinfo} on the way to {poi}", "the route to {poi} has {poitrafficinfo}"],
    ),
    "when": (
        [
            "when is my {poievent}",
            "what time is my {poievent}",
            "remind me when my {poievent} is",
            "when do i have my {poievent}",
            "at what time is the {poievent}",
        ],
        ["your {poievent} is on {poidate} at {poitime}", "you have a {poievent} on {poidate} at {poitime}"],
    ),
    "who": (
        [
            "who is coming to my {poievent}",
            "who will attend the {poievent}",
            "with whom is my {poievent}",
            "who am i meeting at my {poievent}",
            "who else is at the {poievent}",
        ],
        ["your {poievent} is with {poiparty}", "{poiparty} will join your {poievent}"],
    ),
}
NAVIGATION_TEMPLATES = ("address", "traffic")
CALENDAR_TEMPLATES = ("when", "who")
CHITCHAT = [("thank you", "you are welcome"), ("thanks a lot", "you are welcome"), ("great thanks", "happy to help")]


@dataclass
class CarCorpusConfig:
    navigation_scenarios: int = 12
    calendar_scenarios: int = 12
    types_per_scenario: int = 2
    events_per_scenario: int = 2
    paraphrases: int = 5
    answers: int = 2
    seed: int = 0


@dataclass
class SyntheticTurn:
    """One generated turn with every intermediate artifact of the three stages."""

    scenario: str
    template: str
    question: str
    attenuated_question: str
    slots: list[str]
    template_answer: str
    memory: dict[str, str]
    answer: str


@dataclass
class CarCorpus:
    config: CarCorpusConfig
    kbs: dict[str, KnowledgeBase]
    turns: list[SyntheticTurn] = field(default_factory=list)
    chitchat: list[tuple[str, str, str]] = field(default_factory=list)

    def dialogues(self, turns: list[SyntheticTurn] | None = None, with_entries: bool = True) -> list[dict]:
        """Raw dialogue records grouped by scenario, chit-chat last."""
        turns = self.turns if turns is None else turns
        grouped: dict[str, list[dict]] = {s: [] for s in self.kbs}
        for t in turns:
            rec = {"user": t.question, "assistant": t.answer}
            if with_entries:
                rec["kb_entry"] = dict(t.memory)
            grouped[t.scenario].append(rec)
        for scenario, user, assistant in self.chitchat:
            grouped[scenario].append({"user": user, "assistant": assistant})
        return [{"scenario": s, "turns": ts} for s, ts in grouped.items() if ts]


def _slot_template(template: str) -> str:
    return template.format(**{slot: slot for slot in LEXICON})


def generate_car_corpus(config: CarCorpusConfig | None = None) -> CarCorpus:
    config = config or CarCorpusConfig()
    if config.paraphrases > 5 or config.answers > 2 or config.answers > config.paraphrases:
        raise ValueError("at most 5 paraphrases and 2 answers (answers <= paraphrases) are available")
    rng = np.random.default_rng(config.seed)
    types = list(POI_TYPES)
    used_per_type = {t: 0 for t in types}
    kbs: dict[str, KnowledgeBase] = {}
    turns: list[SyntheticTurn] = []
    chitchat: list[tuple[str, str, str]] = []

    def emit(scenario: str, template: str, entry: dict[str, str], p: int) -> None:
        questions, answers = TEMPLATES[template]
        attenuated = " ".join(
            "poidistance" if w in SUPERLATIVES else w for w in _slot_template(questions[p]).split()
        )
        turns.append(
            SyntheticTurn(
                scenario=scenario,
                template=template,
                question=questions[p].format(**entry),
                attenuated_question=attenuated,
                slots=LEXICON.order(attenuated.split()),
                template_answer=_slot_template(answers[p % config.answers]),
                memory=dict(entry),
                answer=answers[p % config.answers].format(**entry),
            )
        )

    for s in range(config.navigation_scenarios):
        scenario = f"nav{s:03d}"
        chosen = [types[(config.types_per_scenario * s + k) % len(types)] for k in range(config.types_per_scenario)]
        entries = []
        for poitype in chosen:
            near = int(rng.integers(1, 5))
            far = near + int(rng.integers(1, 5))
            # the first-listed entry of each type is never the nearest one
            for distance in (far, near):
                j = used_per_type[poitype]
                used_per_type[poitype] += 1
                entries.append(
                    {
                        "poitype": poitype,
                        "poi": f"{NAME_WORDS[j]} {POI_TYPES[poitype]}",
                        "poidistance": f"{distance} miles",
                        "poiaddress": " ".join(
                            (
                                ADDRESS_NUMBERS[int(rng.integers(len(ADDRESS_NUMBERS)))],
                                ADDRESS_STREETS[int(rng.integers(len(ADDRESS_STREETS)))],
                                ADDRESS_KINDS[int(rng.integers(len(ADDRESS_KINDS)))],
                            )
                        ),
                        "poitrafficinfo": TRAFFIC[int(rng.integers(len(TRAFFIC)))],
                    }
                )
        kbs[scenario] = KnowledgeBase(scenario, entries)
        for poitype in chosen:
            nearest = min((e for e in entries if e["poitype"] == poitype), key=lambda e: int(e["poidistance"].split()[0]))
            for p in range(config.paraphrases):
                emit(scenario, "nearest", nearest, p)
        for entry in entries:
            for template in NAVIGATION_TEMPLATES:
                for p in range(config.paraphrases):
                    emit(scenario, template, entry, p)
        chitchat.append((scenario,) + CHITCHAT[s % len(CHITCHAT)])

    event_index = 0
    for s in range(config.calendar_scenarios):
        scenario = f"cal{s:03d}"
        entries = []
        for _ in range(config.events_per_scenario):
            activity = ACTIVITIES[event_index % len(ACTIVITIES)]
            kind = EVENT_KINDS[(event_index // len(ACTIVITIES)) % len(EVENT_KINDS)]
            event_index += 1
            entries.append(
                {
                    "poievent": f"{activity} {kind}",
                    "poidate": DAYS[int(rng.integers(len(DAYS)))],
                    "poitime": TIMES[int(rng.integers(len(TIMES)))],
                    "poiparty": PARTIES[int(rng.integers(len(PARTIES)))],
                }
            )
        kbs[scenario] = KnowledgeBase(scenario, entries)
        for entry in entries:
            for template in CALENDAR_TEMPLATES:
                for p in range(config.paraphrases):
                    emit(scenario, template, entry, p)
        chitchat.append((scenario,) + CHITCHAT[(config.navigation_scenarios + s) % len(CHITCHAT)])
    if event_index > len(ACTIVITIES) * len(EVENT_KINDS):
        raise ValueError("too many calendar events for unique event names")
    if max(used_per_type.values(), default=0) > len(NAME_WORDS):
        raise ValueError("too many entries per point-of-interest type for unique names")
    return CarCorpus(config, kbs, turns, chitchat)


def expected_stage_sizes(config: CarCorpusConfig) -> dict[str, int]:
    """Deduplicated stage sizes implied by the template counts.

    Stage 1 holds one row per distinct raw question: type-level questions
    repeat across scenarios sharing a type, entity questions are unique.  Stage
    2 holds one row per question paraphrase.  Stage 3 holds one row per
    (entity, answer template) pair.
    """
    p, a = config.paraphrases, config.answers
    n_types = len(POI_TYPES)
    types_used = min(n_types, config.navigation_scenarios * config.types_per_scenario)
    nav_entities = 2 * config.types_per_scenario * config.navigation_scenarios
    cal_entities = config.events_per_scenario * config.calendar_scenarios
    chit = min(len(CHITCHAT), config.navigation_scenarios + config.calendar_scenarios)
    n_templates = 1 + len(NAVIGATION_TEMPLATES) + len(CALENDAR_TEMPLATES)
    return {
        "1": types_used * p + (nav_entities + cal_entities) * 2 * p + chit,
        "2": n_templates * p,
        "3": config.types_per_scenario * config.navigation_scenarios * a + (nav_entities + cal_entities) * 2 * a,
    }


# ---------------------------------------------------------------- style corpus

CITIES = ["bombay", "paris", "london", "madrid", "rome", "tokyo", "seoul", "hanoi", "lima", "oslo"]
CUISINES = ["italian", "indian", "french", "spanish", "thai", "korean"]
PEOPLE = ["two", "four", "six", "eight"]
PRICES = ["cheap", "moderate", "expensive"]

STYLE_INTENTS: dict[str, tuple[list[str], dict[str, str]]] = {
    "location": (
        ["{city} please", "in {city}", "i want to eat in {city}", "somewhere in {city}"],
        {
            "elderly": "would you mind telling me how many guests shall be at your table",
            "young": "how many are you",
            "middle-aged": "ok {honorific} i'm looking for options for you",
        },
    ),
    "book": (
        ["can you book a table", "i'd like to book a table", "may i have a table", "book a table for me"],
        {
            "elderly": "thank you {honorific} i shall start the reservation now",
            "young": "cool i'm on it",
            "middle-aged": "sure {honorific} let me book that",
        },
    ),
    "cuisine": (
        ["with {cuisine} food", "i love {cuisine} cuisine", "{cuisine} food please", "make it {cuisine}"],
        {
            "elderly": "may i kindly ask in which price range you are looking {honorific}",
            "young": "what price range",
            "middle-aged": "which price range do you prefer {honorific}",
        },
    ),
    "party": (
        ["we will be {people}", "for {people} people", "{people} of us", "a table for {people}"],
        {
            "elderly": "splendid {honorific} which cuisine would you like to have",
            "young": "any cuisine",
            "middle-aged": "ok {honorific} which cuisine would you like",
        },
    ),
    "price": (
        ["in a {price} price range", "something {price}", "{price} please", "i want a {price} place"],
        {
            "elderly": "thank you {honorific} please give me a moment to find options",
            "young": "ok let me look",
            "middle-aged": "sure {honorific} let me find some options",
        },
    ),
}
HONORIFICS = {"female": "madam", "male": "sir"}


def style_answer(intent: str, gender: str, age: str) -> str:
    return STYLE_INTENTS[intent][1][age].format(honorific=HONORIFICS[gender])


def generate_style_corpus(n_turns: int = 500, seed: int = 0) -> list[dict]:
    """Records ``{question, gender, age, answer, intent}`` with uniformly drawn profiles."""
    rng = np.random.default_rng(seed)
    intents = list(STYLE_INTENTS)
    ages = ["young", "middle-aged", "elderly"]
    genders = ["female", "male"]
    fills = {"city": CITIES, "cuisine": CUISINES, "people": PEOPLE, "price": PRICES}
    records = []
    for _ in range(n_turns):
        intent = intents[int(rng.integers(len(intents)))]
        questions = STYLE_INTENTS[intent][0]
        question = questions[int(rng.integers(len(questions)))]
        values = {k: v[int(rng.integers(len(v)))] for k, v in fills.items()}
        gender = genders[int(rng.integers(2))]
        age = ages[int(rng.integers(3))]
        records.append(
            {
                "question": question.format(**values),
                "gender": gender,
                "age": age,
                "answer": style_answer(intent, gender, age),
                "intent": intent,
            }
        )
    return records
