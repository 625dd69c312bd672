import os
from dotenv import load_dotenv
from pydantic_settings import BaseSettings

# Load environment variables
load_dotenv()

class Settings(BaseSettings):
    # App Settings
    APP_NAME: str = "FlowTrial"
    API_V1_STR: str = "/api/v1"
    LOG_LEVEL: str = os.getenv("FLOWTRIAL_LOG_LEVEL", "INFO")

    # Run artifacts
    OUTPUT_ROOT: str = os.getenv("FLOWTRIAL_OUTPUT_ROOT", "runs")
    LOCK_FILE_NAME: str = ".flowtrial.lock"

    # Simulated cluster
    DEFAULT_SLOT_BUDGET: int = int(os.getenv("FLOWTRIAL_SLOT_BUDGET", "64"))
    PRODUCTION_PIPELINE_ID: str = "production"
    # modeled start-up cost per allocated slot
    PROVISION_MS_PER_SLOT: int = int(os.getenv("FLOWTRIAL_PROVISION_MS_PER_SLOT", "30000"))

    # CORS Settings
    CORS_ORIGINS: list = ["http://localhost:3000", "http://localhost:8000"]

settings = Settings()
