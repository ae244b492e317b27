from hypothesis import settings

# same examples on every run, like the simulator itself
settings.register_profile("repeatable", derandomize=True, print_blob=True)
settings.load_profile("repeatable")
