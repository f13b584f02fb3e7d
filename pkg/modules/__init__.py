# pisonet modules
