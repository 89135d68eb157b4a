# registration helpers
