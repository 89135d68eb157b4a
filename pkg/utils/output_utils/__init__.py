# output helpers (atomic writes, CSV reports)
