"""Task names and the stage -> allowed-task map."""

TASKS = ("V2A", "TTS", "V2ST")

STAGE_TASKS = {
    1: ("V2A",),
    2: ("V2A", "TTS"),
    3: ("V2A", "TTS", "V2ST"),
}
