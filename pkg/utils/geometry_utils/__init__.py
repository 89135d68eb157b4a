# geometry helpers
