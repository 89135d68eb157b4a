# input helpers (cloud file readers)
