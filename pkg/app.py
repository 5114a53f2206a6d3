import os

import streamlit as st
from src.gridsentinel.dashboard import show_dashboard_page

# Page configuration
st.set_page_config(
    page_title="GridSentinel",
    page_icon="⚡",
    layout="wide",
    initial_sidebar_state="expanded"
)

RUNS_ROOT = os.getenv("GRIDSENTINEL_RUNS", "runs")

if 'run' not in st.session_state:
    st.session_state.run = None


def main():
    """Run viewer over <RUNS_ROOT>/<run>/<stage> directories"""
    show_dashboard_page(RUNS_ROOT)


if __name__ == "__main__":
    main()
