"""Lock protocol engines: they share the kernel and the engine contract."""
