# Text formatting for CLI summaries
