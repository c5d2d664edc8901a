"""Scanner simulator: synthetic sessions, streaming client, verification."""
