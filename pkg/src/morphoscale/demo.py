"""Two small Galaxy-Zoo-like campaigns for examples and tests."""

from morphoscale.schema import Answer, Campaign, Question


def demo_campaigns() -> list[Campaign]:
    gz2 = Campaign(
        id="gz2",
        roots=("smooth-or-featured",),
        questions=(
            Question(
                "smooth-or-featured",
                "Is the galaxy simply smooth and rounded?",
                (
                    Answer("smooth", "Smooth"),
                    Answer("featured", "Features or disk", child_question="disk-edge-on"),
                    Answer("artifact", "Star or artifact"),
                ),
            ),
            Question(
                "disk-edge-on",
                "Could this be a disk viewed edge-on?",
                (Answer("yes", "Yes"), Answer("no", "No", child_question="has-spiral-arms")),
            ),
            Question(
                "has-spiral-arms",
                "Is there any sign of a spiral arm pattern?",
                (Answer("yes", "Yes", child_question="spiral-arm-count"), Answer("no", "No")),
            ),
            Question(
                "spiral-arm-count",
                "How many spiral arms are there?",
                (Answer("1", "1"), Answer("2", "2"), Answer("3+", "3 or more")),
            ),
        ),
    )
    desi = Campaign(
        id="desi",
        roots=("smooth-or-featured",),
        questions=(
            Question(
                "smooth-or-featured",
                "Is the galaxy simply smooth and rounded?",
                (
                    Answer("smooth", "Smooth"),
                    Answer("featured", "Features or disk", child_question="bar"),
                    Answer("artifact", "Star or artifact"),
                ),
            ),
            Question(
                "bar",
                "Is there a bar?",
                (Answer("strong", "Strong bar"), Answer("weak", "Weak bar"), Answer("none", "No bar")),
            ),
        ),
    )
    return [gz2, desi]
