# network helpers
