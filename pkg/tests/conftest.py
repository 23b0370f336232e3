from hypothesis import settings

# numba compiles on first call; wall-clock deadlines would flag that as flaky
settings.register_profile("default", deadline=None)
settings.load_profile("default")
