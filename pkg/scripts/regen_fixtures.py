"""Regenerate the golden test fixtures under tests/fixtures/.

The night-car conversation and the sedan inference scripts are the reference
transcripts the test suite pins down; this script rebuilds their canonical
serialized forms from the source strings so the fixtures stay in sync with the
record serializer. Run from the repo root:

    python scripts/regen_fixtures.py
"""

from __future__ import annotations

import json
import os
import sys

sys.path.insert(0, os.path.join(os.path.dirname(__file__), "..", "src"))

from selfask.conversation import CapQASample, Conversation, Turn, serialize_sample, validate_structure
from selfask.datagen import build_label_question_prompt
from selfask.pipeline import (
    DEFAULT_MAIN_QUESTION,
    DESCRIBE_PROMPT,
    SELF_ANSWER_PROMPT,
    SUMMARIZE_PROMPT,
    build_self_ask_prompt,
)

FIXTURES = os.path.join(os.path.dirname(__file__), "..", "tests", "fixtures")

# --- night-car conversation: the reference structured training sample -----------

NIGHTCAR_QUESTIONS = [
    "What specific part of the vehicle is the person located at?",
    "Has the person opened the vehicle door?",
    "What time of day is the activity taking place?",
    "Does the person's expression or body language indicate they are in a hurry or relaxed?",
    "Is the surrounding environment quiet?",
    "What type and condition is the vehicle in?",
    "Is the person carrying any items?",
    "Does the person appear to be preparing to drive away, or have they just arrived?",
    "Is the person checking inside the vehicle or the surrounding area?",
    "Is the vehicle door fully open, or only partially open?",
    "Are the person's hands visible, and are they performing any specific actions?",
    "Does the person's standing posture suggest they are about to enter the vehicle?",
    "Besides the vehicle and person, are there any other significant objects or actions?",
]

NIGHTCAR_ANSWERS = [
    "The person is standing by the side of the vehicle, near the driver's seat door.",
    "Yes, the vehicle door is open.",
    "Considering the surrounding light, it appears to be nighttime.",
    "It's hard to discern the person's expression due to the brightness of the photo, but the "
    "body language seems relaxed.",
    "The environment appears to be quiet, with no noticeable activity from other people or "
    "vehicles.",
    "The vehicle is a black sedan with a somewhat reflective surface, appearing to be in good "
    "condition.",
    "The person does not appear to be carrying any items.",
    "The open door and the person's stance suggest they are preparing to drive away rather than "
    "having just arrived.",
    "The person seems to be checking inside the vehicle, leaning slightly towards the interior.",
    "The vehicle door is fully open.",
    "One hand appears to rest on the edge of the open door, while the other is not clearly "
    "visible.",
    "Yes, the person's standing posture suggests they are about to enter the vehicle.",
    "No other significant objects or actions are visible; the street is empty and still.",
]

NIGHTCAR_DETAILED = (
    "In this nighttime photo, a person is near a black sedan parked at the side of a street. "
    "The streetlights cast a soft glow, and the vehicle’s door is fully open. The person "
    "stands at the driver’s side door, leaning towards the inside of the car, apparently "
    "observing the interior or preparing to enter. They are dressed in dark clothing, blending "
    "into the night. The surrounding environment is very quiet, with no other pedestrians or "
    "vehicles, reflecting a tranquil atmosphere. The person appears not to be carrying any "
    "items, suggesting they might be near home and do not need to carry extra items."
)

NIGHTCAR_CONCISE = (
    "At night, a person dressed in dark clothing is preparing to enter a black sedan parked on "
    "the street side. The door is fully open, and they seem to be getting ready to sit in the "
    "driver’s seat. The environment is quiet, with no other apparent activities, giving "
    "the whole scene a peaceful nighttime ambiance."
)

NIGHTCAR_LABEL = "person enters car"


def nightcar_sample() -> CapQASample:
    question_block = "\n".join(f"Q{i}. {q}" for i, q in enumerate(NIGHTCAR_QUESTIONS))
    turns = [Turn(build_label_question_prompt() + "\n<image>", question_block, "question_gen")]
    for question, answer in zip(NIGHTCAR_QUESTIONS, NIGHTCAR_ANSWERS):
        turns.append(Turn(question, answer, "qa"))
    turns.append(Turn(DESCRIBE_PROMPT, "Detailed Description:\n" + NIGHTCAR_DETAILED, "description"))
    turns.append(Turn(SUMMARIZE_PROMPT, "Concise Description:\n" + NIGHTCAR_CONCISE, "caption"))
    conversation = Conversation(image_ref="images/nightcar-0001.jpg", turns=tuple(turns))
    return CapQASample(
        id="nightcar-0001",
        image_ref="images/nightcar-0001.jpg",
        activity_label=NIGHTCAR_LABEL,
        conversation=conversation,
        split="train",
    )


# --- sedan inference scripts: scripted replies for the staged pipeline -----------

SEDAN_QUESTIONS_REPLY = "\n".join(
    [
        "Q0. What is the person doing in the image?",
        "Q1. What type of vehicle is the person getting out of?",
        "Q2. Is the person getting out of a car or a truck?",
        "Q3. What is the person wearing while getting out of the vehicle?",
        "Q4. Is the person standing on a sidewalk or in the street?",
        "Q5. What can be inferred about the person's intentions or actions from the image?",
    ]
)

SEDAN_ANSWERS_REPLY = "\n".join(
    [
        "Q0. What is the person doing in the image?",
        "A. The person is getting out of a car, specifically a black sedan.",
        "Q1. What type of vehicle is the person getting out of?",
        "A. The person is getting out of a black sedan.",
        "Q2. Is the person getting out of a car or a truck?",
        "A. The person is getting out of a car, not a truck.",
        "Q3. What is the person wearing while getting out of the vehicle?",
        "A. The person is wearing a hooded sweatshirt while getting out of the car.",
        "Q4. Is the person standing on a sidewalk or in the street?",
        "A. The person is standing in the street, not on a sidewalk.",
        "Q5. What can be inferred about the person's intentions or actions from the image?",
        "A. From the image, it can be inferred that the person is either arriving at or departing "
        "from their destination, as they are getting out of the car. The fact that they are "
        "wearing a hooded sweatshirt suggests that the weather might be cold or that they are "
        "prepared for the possibility of cold weather during their journey.",
    ]
)

SEDAN_FINAL_REPLY = (
    "In the image, a person is getting out of a black sedan parked on the street. The individual "
    "is wearing a hooded sweatshirt, which indicates that the weather might be cold or that they "
    "are prepared for the possibility of cold weather during their journey. The person is "
    "standing in the street, not on a sidewalk, which could suggest that they are either "
    "arriving at or departing from their destination. The presence of a second car parked nearby "
    "further emphasizes the idea that this might be a parking spot or a location where multiple "
    "people are getting in and out of their vehicles. The person's actions in the image are "
    "typical for someone who is either arriving at or departing from a destination, and their "
    "choice of clothing reflects the potential weather conditions they might be facing."
)

SEDAN_ONE_TURN_REPLY = (
    "In the image, a person is walking towards a black car that is parked in a driveway. The car "
    "is positioned near the curb, and the person is likely getting ready to enter the vehicle. "
    "The person is wearing a black jacket, which suggests that the weather might be cool or the "
    "person is dressed for a specific occasion. The car is a small, black sedan, and there are "
    "two other cars visible in the background, one of which is parked further away from the "
    "main car."
)


def three_turn_script() -> list[dict]:
    return [
        {"match": {"contains": "formulate"}, "reply": SEDAN_QUESTIONS_REPLY},
        {"match": {"contains": "answer all the questions"}, "reply": SEDAN_ANSWERS_REPLY},
        {"match": {"contains": "Use detailed descriptions"}, "reply": SEDAN_FINAL_REPLY},
    ]


def one_turn_script() -> list[dict]:
    return [{"match": {"contains": "Use detailed descriptions"}, "reply": SEDAN_ONE_TURN_REPLY}]


def describe_script() -> list[dict]:
    return [
        {"match": {"contains": "formulate"}, "reply": SEDAN_QUESTIONS_REPLY},
        {"match": {"contains": "answer all the questions"}, "reply": SEDAN_ANSWERS_REPLY},
        {"match": {"contains": "Write down a detailed description"}, "reply": NIGHTCAR_DETAILED},
        {"match": {"contains": "Summarize the details"}, "reply": NIGHTCAR_CONCISE},
    ]


def expected_three_turn_transcript() -> Conversation:
    ask_prompt = build_self_ask_prompt(DEFAULT_MAIN_QUESTION, 6, 8)
    turns = (
        Turn(ask_prompt + "\n<image>", SEDAN_QUESTIONS_REPLY, "question_gen"),
        Turn(SELF_ANSWER_PROMPT, SEDAN_ANSWERS_REPLY, "qa"),
        Turn(DEFAULT_MAIN_QUESTION, SEDAN_FINAL_REPLY, "description"),
    )
    return Conversation(
        image_ref="images/sedan-0001.jpg", turns=turns, main_question=DEFAULT_MAIN_QUESTION
    )


def main() -> None:
    os.makedirs(FIXTURES, exist_ok=True)

    sample = nightcar_sample()
    problems = validate_structure(sample.conversation, sample.activity_label)
    if problems:
        raise SystemExit(f"night-car fixture does not validate: {problems}")
    with open(os.path.join(FIXTURES, "conversation_nightcar.jsonl"), "w", encoding="utf-8") as fh:
        fh.write(serialize_sample(sample) + "\n")

    for name, script in [
        ("script_sedan_three_turn.json", three_turn_script()),
        ("script_sedan_one_turn.json", one_turn_script()),
        ("script_sedan_describe.json", describe_script()),
    ]:
        with open(os.path.join(FIXTURES, name), "w", encoding="utf-8") as fh:
            json.dump(script, fh, ensure_ascii=False, indent=2)
            fh.write("\n")

    from selfask.conversation import serialize_conversation

    transcript = expected_three_turn_transcript()
    with open(
        os.path.join(FIXTURES, "transcript_sedan_three_turn.jsonl"), "w", encoding="utf-8"
    ) as fh:
        fh.write(serialize_conversation(transcript, record_id="sedan-0001") + "\n")

    print(f"fixtures written to {os.path.normpath(FIXTURES)}")


if __name__ == "__main__":
    main()
